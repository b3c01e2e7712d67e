"""
Reverse-mode differentiation on an explicit computation record.

A :py:class:`Tape` stores every value produced during a forward evaluation together
with the primitive that produced it. :py:func:`backward` walks the record in
reverse order and applies each primitive's vector-Jacobian product.

Primitives are plain objects holding a forward function and its adjoint, in the
``defvjp`` style:

- ``forward(*inputs, **static) -> value``
- ``vjp(g, ans, *inputs, **static) -> tuple`` of one cotangent per input
  (``None`` for an input that needs no cotangent)

``static`` arguments are constants of the primitive (an image, a patch size ...)
and never receive a gradient.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg as la

from openlandmark.core import validation


@dataclass(frozen=True)
class Primitive:
    """Differentiable operation: a forward function and its vector-Jacobian product."""

    name: str
    forward: Callable
    vjp: Callable

    def __repr__(self):
        return f"Primitive({self.name})"


@dataclass
class _Node:
    primitive: Optional[Primitive]
    inputs: Tuple[int, ...]
    static: Dict
    value: np.ndarray
    name: Optional[str]
    requires_grad: bool


class Var:
    """Handle on a value recorded in a :py:class:`Tape`."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return np.shape(self.value)

    def __repr__(self):
        node = self.tape._nodes[self.index]
        label = node.name or (node.primitive.name if node.primitive else "constant")
        return f"Var({label}, shape={self.shape})"


class Tape:
    """
    Ordered record of a forward computation.

    Example
    -------

    >>> import numpy as np
    >>> from openlandmark.core.tape import Tape, backward, matmul, sum_all
    >>> tape = Tape()
    >>> x = tape.leaf(np.array([[1.0, 2.0]]), "x")
    >>> a = tape.constant(np.array([[3.0], [4.0]]))
    >>> y = sum_all(tape, matmul(tape, x, a))
    >>> backward(tape, output=y)["x"]
    array([[3., 4.]])
    """

    def __init__(self):
        self._nodes: List[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def _push(self, node: _Node) -> Var:
        self._nodes.append(node)
        return Var(self, len(self._nodes) - 1)

    def leaf(self, value, name: str) -> Var:
        """Registers a named input that receives a gradient."""
        if name in self.leaves:
            raise validation.UserInputError(f"a leaf named {name} is already on the tape")
        return self._push(_Node(None, (), {}, np.asarray(value, dtype=np.float64), name, True))

    def constant(self, value) -> Var:
        """Registers an input that receives no gradient."""
        return self._push(_Node(None, (), {}, np.asarray(value, dtype=np.float64), None, False))

    def apply(self, primitive: Primitive, *args: Var, **static) -> Var:
        """Evaluates ``primitive`` on recorded values and records the result."""
        for a in args:
            if not isinstance(a, Var) or a.tape is not self:
                raise validation.UserInputError(
                    f"inputs of {primitive.name} must be variables of the same tape"
                )
        inputs = tuple(a.index for a in args)
        value = primitive.forward(*(self._nodes[i].value for i in inputs), **static)
        requires_grad = any(self._nodes[i].requires_grad for i in inputs)
        return self._push(
            _Node(primitive, inputs, static, np.asarray(value), None, requires_grad)
        )

    @property
    def leaves(self) -> Dict[str, Var]:
        return {n.name: Var(self, i) for i, n in enumerate(self._nodes) if n.name is not None}

    def replay(self, output: Optional[Var] = None) -> np.ndarray:
        """Re-evaluates the recorded operations from the stored inputs.

        Returns the value of ``output`` (the last recorded value by default). The
        replayed values must equal the recorded ones bit for bit.
        """
        values = []
        for node in self._nodes:
            if node.primitive is None:
                values.append(node.value)
            else:
                values.append(
                    np.asarray(
                        node.primitive.forward(*(values[i] for i in node.inputs), **node.static)
                    )
                )
        index = len(values) - 1 if output is None else output.index
        return values[index]


class Gradients(dict):
    """Mapping leaf name -> gradient array, with the same shape as the leaf."""

    def flat(self, names: List[str]) -> np.ndarray:
        return np.concatenate([np.ravel(self[n]) for n in names])


def backward(tape: Tape, seed: float = 1.0, output: Optional[Var] = None) -> Gradients:
    """
    Reverse pass over ``tape``.

    Parameters
    ----------
    tape : Tape
        recorded computation
    seed : float, optional
        cotangent of the output, by default 1.0
    output : Var, optional
        output to differentiate, by default the last recorded value

    Returns
    -------
    Gradients
        gradient of every named leaf. Leaves the output does not depend on get zeros.
    """
    nodes = tape._nodes
    if not nodes:
        raise validation.UserInputError("cannot differentiate an empty tape")
    out = len(nodes) - 1 if output is None else output.index

    adjoints: Dict[int, np.ndarray] = {out: seed * np.ones_like(nodes[out].value, dtype=np.float64)}
    for idx in range(out, -1, -1):
        node = nodes[idx]
        g = adjoints.get(idx)
        if g is None or node.primitive is None or not node.requires_grad:
            continue
        inputs = [nodes[i].value for i in node.inputs]
        cotangents = node.primitive.vjp(g, node.value, *inputs, **node.static)
        if len(cotangents) != len(node.inputs):
            raise RuntimeError(
                f"{node.primitive.name} returned {len(cotangents)} cotangents "
                f"for {len(node.inputs)} inputs"
            )
        for i, ct in zip(node.inputs, cotangents):
            if ct is None or not nodes[i].requires_grad:
                continue
            ct = np.reshape(ct, np.shape(nodes[i].value))
            adjoints[i] = ct if i not in adjoints else adjoints[i] + ct

    grads = Gradients()
    for i, node in enumerate(nodes):
        if node.name is not None:
            grads[node.name] = adjoints.get(i, np.zeros_like(node.value))
    return grads


def value_and_grad(build: Callable[[Tape, Var], Var], name: str = "x") -> Callable:
    """Wraps ``build(tape, x) -> scalar Var`` into ``f(x) -> (value, gradient)``."""

    def f(x):
        tape = Tape()
        xv = tape.leaf(x, name)
        out = build(tape, xv)
        grads = backward(tape, output=out)
        return float(out.value), grads[name]

    return f


def fd_check(fn: Callable, point, step: float = 1e-4) -> float:
    """
    Compares a reverse-mode gradient with central finite differences.

    Parameters
    ----------
    fn : callable
        ``fn(x) -> (value, gradient)``
    point : array-like
        evaluation point
    step : float, optional
        finite difference step, by default 1e-4

    Returns
    -------
    float
        max over coordinates of ``|g_rm - g_fd| / (|g_fd| + 1e-8)``
    """
    x = np.array(point, dtype=np.float64)
    _, grad = fn(x)
    grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    validation.must_be_finite(grad, "reverse-mode gradient")
    worst = 0.0
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        fp, fm = fn(xp)[0], fn(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise validation.NonFiniteError(f"function is not finite around coordinate {i}")
        fd = (fp - fm) / (2 * step)
        worst = max(worst, abs(grad[i] - fd) / (abs(fd) + 1e-8))
    return worst


# ----------------------------------------------------------------
#                       GENERIC PRIMITIVES
# ----------------------------------------------------------------


ADD = Primitive("add", lambda a, b: a + b, lambda g, ans, a, b: (g, g))
SCALE = Primitive(
    "scale",
    lambda a, factor: factor * a,
    lambda g, ans, a, factor: (factor * g,),
)
MUL_CONST = Primitive(
    "mul_const",
    lambda a, const: a * const,
    lambda g, ans, a, const: (g * const,),
)
SUM = Primitive(
    "sum",
    lambda a: np.sum(a),
    lambda g, ans, a: (np.full(np.shape(a), g, dtype=np.float64),),
)
MEAN = Primitive(
    "mean",
    lambda a: np.mean(a),
    lambda g, ans, a: (np.full(np.shape(a), g / np.size(a), dtype=np.float64),),
)
MATMUL = Primitive(
    "matmul",
    lambda a, b: a @ b,
    lambda g, ans, a, b: (g @ b.T, a.T @ g),
)
RESHAPE = Primitive(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, ans, a, shape: (np.reshape(g, np.shape(a)),),
)


def _take_vjp(g, ans, a, index):
    out = np.zeros_like(a)
    out[index] = g
    return (out,)


TAKE = Primitive("take", lambda a, index: a[index], _take_vjp)


def _concat_vjp(g, ans, a, b):
    n = np.shape(a)[0]
    return (g[:n], g[n:])


CONCAT_ROWS = Primitive("concat_rows", lambda a, b: np.concatenate([a, b], axis=0), _concat_vjp)
RELU = Primitive(
    "relu",
    lambda a: np.maximum(a, 0.0),
    lambda g, ans, a: (g * (a > 0),),
)
TANH = Primitive("tanh", np.tanh, lambda g, ans, a: (g * (1.0 - ans**2),))
AFFINE = Primitive(
    "affine",
    lambda a, scale, shift: a * scale + shift,
    lambda g, ans, a, scale, shift: (g * scale,),
)


def lu_factorize(matrix: np.ndarray, max_condition: float = 1e12):
    """LU factorization with a singularity check based on a 1-norm condition estimate.

    Raises
    ------
    SingularSystemError
        when the matrix is exactly singular or its condition estimate exceeds
        ``max_condition``.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    validation.must_be_finite(matrix, "system matrix")
    lu, piv = la.lu_factor(matrix, check_finite=False)
    if np.any(np.diag(lu) == 0.0):
        raise validation.SingularSystemError("system matrix is exactly singular")
    anorm = np.linalg.norm(matrix, 1)
    rcond, info = la.lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or rcond <= 0.0 or 1.0 / rcond > max_condition:
        condition = float("inf") if rcond <= 0.0 else 1.0 / rcond
        raise validation.SingularSystemError(
            f"system matrix is ill-conditioned (condition estimate {condition:.3e})",
            condition=condition,
        )
    return lu, piv


def _solve_forward(matrix, rhs):
    return la.lu_solve(lu_factorize(matrix), rhs, check_finite=False)


def _solve_vjp(g, ans, matrix, rhs):
    rhs_bar = la.lu_solve(lu_factorize(matrix), g, trans=1, check_finite=False)
    matrix_bar = -np.reshape(rhs_bar, (matrix.shape[0], -1)) @ np.reshape(
        ans, (matrix.shape[0], -1)
    ).T
    return (matrix_bar, rhs_bar)


#: solution X of A X = B for every column of B with a single factorization
LU_SOLVE = Primitive("lu_solve", _solve_forward, _solve_vjp)


def _inverse(matrix):
    return la.lu_solve(lu_factorize(matrix), np.eye(matrix.shape[0]), check_finite=False)


def frobenius_condition(matrix) -> float:
    """Condition number ||A||_F ||A^-1||_F of a square matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    return float(np.linalg.norm(matrix) * np.linalg.norm(_inverse(matrix)))


def _frobenius_condition_vjp(g, ans, matrix):
    inv = _inverse(matrix)
    norm_a = np.linalg.norm(matrix)
    norm_inv = np.linalg.norm(inv)
    grad = (matrix / norm_a) * norm_inv - norm_a * (inv.T @ (inv / norm_inv) @ inv.T)
    return (g * grad,)


FROBENIUS_CONDITION = Primitive(
    "frobenius_condition",
    lambda matrix: np.asarray(frobenius_condition(matrix)),
    _frobenius_condition_vjp,
)


def add(tape: Tape, a: Var, b: Var) -> Var:
    return tape.apply(ADD, a, b)


def scale(tape: Tape, a: Var, factor: float) -> Var:
    return tape.apply(SCALE, a, factor=factor)


def mul_const(tape: Tape, a: Var, const: np.ndarray) -> Var:
    return tape.apply(MUL_CONST, a, const=const)


def sum_all(tape: Tape, a: Var) -> Var:
    return tape.apply(SUM, a)


def mean_all(tape: Tape, a: Var) -> Var:
    return tape.apply(MEAN, a)


def matmul(tape: Tape, a: Var, b: Var) -> Var:
    return tape.apply(MATMUL, a, b)


def reshape(tape: Tape, a: Var, shape: Tuple[int, ...]) -> Var:
    return tape.apply(RESHAPE, a, shape=tuple(shape))


def take(tape: Tape, a: Var, index: int) -> Var:
    return tape.apply(TAKE, a, index=index)


def concat_rows(tape: Tape, a: Var, b: Var) -> Var:
    return tape.apply(CONCAT_ROWS, a, b)


def relu(tape: Tape, a: Var) -> Var:
    return tape.apply(RELU, a)


def tanh(tape: Tape, a: Var) -> Var:
    return tape.apply(TANH, a)


def affine(tape: Tape, a: Var, scale: np.ndarray, shift: np.ndarray) -> Var:
    return tape.apply(AFFINE, a, scale=scale, shift=shift)


def lu_solve(tape: Tape, matrix: Var, rhs: Var) -> Var:
    return tape.apply(LU_SOLVE, matrix, rhs)


def condition(tape: Tape, matrix: Var) -> Var:
    return tape.apply(FROBENIUS_CONDITION, matrix)
