"""
---------------
`Kernel` module
---------------

Thin-plate spline (TPS) systems, their solution and the resulting backward warp.

A system is built from the source and target landmarks of a pair. Its block
``B`` is assembled from the target points and its right-hand side from the source
points, so the solved transform maps the target frame onto the source frame:
``T(target_i) = source_i``. Warping a source image samples it at ``T(x)`` for
every target pixel ``x``.

Unknowns are ordered ``[w_1 .. w_M, a_x, a_y, a_0]`` (radial weights then the
affine part), and the block rows are the ``d + 1`` side conditions followed by
the ``M`` interpolation rows.

The block and right-hand side are assembled in normalized coordinates ``p / scale``
(``scale`` is the largest image extent minus one inside the pipeline), so the
conditioning of a system depends on the landmark layout and not on the image size.
Solved weights are converted back to pixel units.
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import scipy.linalg as la
from numba import njit, f8

from openlandmark.construct import LandmarkSet, Image, KernelKind, corner_points
from openlandmark.core import validation
from openlandmark.core.tape import Primitive, Tape, Var, lu_factorize
from openlandmark.core import tape as tp

#: largest 1-norm condition estimate accepted for a TPS block
MAX_CONDITION = 1e12

Points = Union[LandmarkSet, np.ndarray]


def _points(lms: Points) -> np.ndarray:
    if isinstance(lms, LandmarkSet):
        return lms.points
    return np.asarray(lms, dtype=np.float64)


def coordinate_scale(shape: Tuple[int, ...]) -> float:
    """Length in pixels of one normalized unit for an image of ``shape``: ``max(shape) - 1``."""
    return float(max(max(shape) - 1, 1))


# ----------------------------------------------------------------
#                         RADIAL KERNEL
# ----------------------------------------------------------------


def tps_kernel(r) -> np.ndarray:
    """Thin-plate radial function ``phi(r) = r**2 log r`` with ``phi(0) = 0``.

    Example
    -------

    >>> from openlandmark.core.kernel import tps_kernel
    >>> float(tps_kernel(1.0)), float(tps_kernel(0.0))
    (0.0, 0.0)
    """
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


def _radial_factor(r: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = 2.0 * np.log(r[nz]) + 1.0
    return out


def tps_kernel_gradient(diff) -> np.ndarray:
    """Gradient of ``phi(|v|)`` with respect to v, ``(2 log r + 1) v``, 0 at v = 0."""
    diff = np.asarray(diff, dtype=np.float64)
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    return _radial_factor(r)[..., None] * diff


def _pairwise(a: np.ndarray, b: np.ndarray):
    diff = a[:, None, :] - b[None, :, :]
    return diff, np.sqrt(np.sum(diff * diff, axis=-1))


# ----------------------------------------------------------------
#                           SYSTEM
# ----------------------------------------------------------------


def system_block(points: np.ndarray) -> np.ndarray:
    """(M + d + 1) square TPS block built on ``points``."""
    points = np.asarray(points, dtype=np.float64)
    m, d = points.shape
    size = m + d + 1
    block = np.zeros((size, size))
    block[:d, :m] = points.T
    block[d, :m] = 1.0
    _, r = _pairwise(points, points)
    block[d + 1 :, :m] = tps_kernel(r)
    block[d + 1 :, m : m + d] = points
    block[d + 1 :, m + d] = 1.0
    return block


def system_rhs(points: np.ndarray) -> np.ndarray:
    """(M + d + 1, d) right-hand side, one column per coordinate."""
    points = np.asarray(points, dtype=np.float64)
    m, d = points.shape
    rhs = np.zeros((m + d + 1, d))
    rhs[d + 1 :] = points
    return rhs


def tps_features(control_points: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Feature rows ``[phi(|q - c_1|) .. phi(|q - c_M|), q, 1]`` for every query q.

    The transform of the queries is ``tps_features(c, q) @ weights``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    _, r = _pairwise(coords, np.asarray(control_points, dtype=np.float64))
    return np.hstack([tps_kernel(r), coords, np.ones((coords.shape[0], 1))])


@dataclass(frozen=True)
class TpsSystem:
    """A pair's TPS linear system.

    ``block`` is shared by every coordinate; ``matrix_a`` and ``rhs_b`` give the
    full block-diagonal form over the d coordinates.
    """

    #: square block B assembled from the target points
    block: np.ndarray
    #: (M + d + 1, d) right-hand side assembled from the source points
    rhs: np.ndarray
    source_points: np.ndarray
    target_points: np.ndarray
    kernel: str = "ThinPlate2D"
    #: pixels per normalized unit the block and rhs were built with
    scale: float = 1.0

    @property
    def dim(self) -> int:
        return int(self.target_points.shape[1])

    @property
    def n_points(self) -> int:
        return int(self.target_points.shape[0])

    @property
    def matrix_a(self) -> np.ndarray:
        return la.block_diag(*([self.block] * self.dim))

    @property
    def rhs_b(self) -> np.ndarray:
        return np.concatenate([self.rhs[:, c] for c in range(self.dim)])


@dataclass(frozen=True)
class WarpParams:
    """Solved TPS transform.

    ``weights`` has one column per output coordinate, the first M rows are the
    radial weights and the last d + 1 rows the affine part.
    """

    weights: np.ndarray
    #: points the radial functions are centred on (the target points)
    control_points: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.control_points.shape[1])

    @property
    def rbf_weights(self) -> np.ndarray:
        return self.weights[: self.control_points.shape[0]]

    @property
    def affine(self) -> np.ndarray:
        """(d + 1, d) affine part, rows for x, y (, z) and the constant."""
        return self.weights[self.control_points.shape[0] :]

    @classmethod
    def identity(cls, control_points) -> "WarpParams":
        control_points = np.asarray(control_points, dtype=np.float64)
        m, d = control_points.shape
        weights = np.zeros((m + d + 1, d))
        weights[m : m + d] = np.eye(d)
        return cls(weights=weights, control_points=control_points)


def append_anchors(
    landmarks: LandmarkSet, image_extent: Tuple[int, ...], count: int = 4
) -> LandmarkSet:
    """
    Appends the image corners as fixed anchor points.

    Parameters
    ----------
    landmarks : LandmarkSet
        learned landmarks
    image_extent : tuple of int
        extent in coordinate order (x extent first)
    count : int
        0 (no anchors) or 2**d (all corners), by default 4

    Returns
    -------
    LandmarkSet
        with the anchors last and ``anchor_count`` increased by ``count``
    """
    if count == 0:
        return landmarks
    if len(image_extent) != landmarks.dim:
        raise validation.UserInputError("image extent and landmark dimension differ")
    if count != 2**landmarks.dim:
        raise validation.UserInputError(
            f"anchor count must be 0 or {2 ** landmarks.dim} in {landmarks.dim}D, got {count}"
        )
    corners = corner_points(image_extent)
    return LandmarkSet(
        points=np.vstack([landmarks.points, corners]),
        anchor_count=landmarks.anchor_count + count,
    )


def build_system(
    source: Points, target: Points, kernel: KernelKind = "ThinPlate2D", scale: float = 1.0
) -> TpsSystem:
    """
    Assembles the TPS system of a (source, target) pair.

    Parameters
    ----------
    source : LandmarkSet or (M, d) array
        landmarks of the source image (the image that gets warped)
    target : LandmarkSet or (M, d) array
        landmarks of the target image
    kernel : str
        radial kernel, only "ThinPlate2D"
    scale : float
        the points are divided by ``scale`` before assembly, see :py:func:`coordinate_scale`

    Returns
    -------
    TpsSystem

    Raises
    ------
    UserInputError
        if the sets differ in size or dimension, or hold fewer than d + 1 points
    NonFiniteError
        if a coordinate is not finite
    """
    validation.str_must_be_one_of_those(kernel, "kernel", ["ThinPlate2D"])
    src, tgt = _points(source), _points(target)
    if src.ndim != 2 or tgt.ndim != 2:
        raise validation.UserInputError("landmarks must be (M, d) arrays")
    if src.shape[1] != tgt.shape[1]:
        raise validation.UserInputError("source and target landmarks differ in dimension")
    if src.shape[0] != tgt.shape[0]:
        raise validation.UserInputError(
            f"source has {src.shape[0]} landmarks but target has {tgt.shape[0]}"
        )
    validation.must_be_finite(src, "source landmarks")
    validation.must_be_finite(tgt, "target landmarks")
    if not scale > 0:
        raise validation.UserInputError(f"the coordinate scale must be positive, got {scale}")
    d = tgt.shape[1]
    if tgt.shape[0] < d + 1:
        raise validation.UserInputError(
            f"a {d}D TPS system needs at least {d + 1} points, got {tgt.shape[0]}"
        )
    return TpsSystem(
        block=system_block(tgt / scale),
        rhs=system_rhs(src / scale),
        source_points=src.copy(),
        target_points=tgt.copy(),
        kernel=kernel,
        scale=float(scale),
    )


def _affine_offset(weights: np.ndarray, control_points: np.ndarray, scale: float) -> np.ndarray:
    # sum_i w_i |c_i|**2 per output coordinate, weights in normalized units
    m = control_points.shape[0]
    sq = np.sum((control_points / scale) ** 2, axis=1)
    return np.log(scale) * (sq @ weights[:m])


def to_pixel_weights(weights: np.ndarray, control_points: np.ndarray, scale: float) -> np.ndarray:
    """
    Converts weights solved in normalized coordinates to pixel units.

    With ``T(x) = scale * T_n(x / scale)`` and the side conditions
    ``sum w_i = 0``, ``sum w_i c_i = 0``, the radial weights are divided by
    ``scale``, the linear part is kept and the constant becomes
    ``scale * a_0 - scale * log(scale) * sum_i w_i |c_i / scale|**2``.
    """
    if scale == 1.0:
        return weights.copy()
    m, d = control_points.shape
    out = weights.copy()
    out[:m] = weights[:m] / scale
    out[m + d] = scale * (weights[m + d] - _affine_offset(weights, control_points, scale))
    return out


def to_unit_weights(weights: np.ndarray, control_points: np.ndarray, scale: float) -> np.ndarray:
    """Inverse of :py:func:`to_pixel_weights`."""
    if scale == 1.0:
        return weights.copy()
    m, d = control_points.shape
    out = weights.copy()
    out[:m] = weights[:m] * scale
    out[m + d] = weights[m + d] / scale + _affine_offset(out, control_points, scale)
    return out


def solve_system(system: TpsSystem) -> WarpParams:
    """
    Solves the TPS system, one LU factorization for all coordinates.

    Identical source and target points give the identity transform exactly.

    Raises
    ------
    SingularSystemError
        when the block is singular or its condition estimate exceeds 1e12
    """
    lu_piv = lu_factorize(system.block, MAX_CONDITION)
    if np.array_equal(system.source_points, system.target_points):
        # B w = [0; P] is solved by w = 0 and the identity affine part
        return WarpParams.identity(system.target_points)
    weights = la.lu_solve(lu_piv, system.rhs, check_finite=False)
    return WarpParams(
        weights=to_pixel_weights(weights, system.target_points, system.scale),
        control_points=system.target_points,
    )


def system_residual(system: TpsSystem, params: WarpParams) -> float:
    """Relative residual ``||A w - b|| / ||b||`` of a solution (absolute when b = 0).

    Evaluated on the normalized system the block was built as.
    """
    weights = to_unit_weights(params.weights, params.control_points, system.scale)
    residual = np.linalg.norm(system.block @ weights - system.rhs)
    scale = np.linalg.norm(system.rhs)
    return float(residual / scale) if scale > 0 else float(residual)


def apply_transform(params: WarpParams, coords) -> np.ndarray:
    """Evaluates the transform on an (N, d) array of coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != params.dim:
        raise validation.UserInputError(f"coordinates must be an (N, {params.dim}) array")
    return tps_features(params.control_points, coords) @ params.weights


def condition_number(system: TpsSystem) -> float:
    """
    Frobenius condition number of the full block-diagonal matrix,
    ``d * ||B||_F ||B^-1||_F``.

    The block is the normalized one, so moving two landmarks together raises the
    value whatever the image size.

    Raises
    ------
    SingularSystemError
        when the block cannot be inverted
    """
    return system.dim * tp.frobenius_condition(system.block)


def frobenius_condition(matrix) -> float:
    """``||A||_F ||A^-1||_F`` of any invertible square matrix.

    Example
    -------

    >>> import numpy as np
    >>> from openlandmark.core.kernel import frobenius_condition
    >>> round(frobenius_condition(np.diag([1.0, 2.0])), 12)
    2.5
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise validation.UserInputError("condition number needs a square matrix")
    return tp.frobenius_condition(matrix)


# ----------------------------------------------------------------
#                      BILINEAR SAMPLING
# ----------------------------------------------------------------


def pixel_grid(shape: Tuple[int, int]) -> np.ndarray:
    """(H * W, 2) coordinates (x, y) of every pixel, row-major."""
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.column_stack([xs.ravel(), ys.ravel()])


@njit(f8[:](f8[:, :], f8[:, :]), cache=True)
def bilinear_sample(image, coords):
    h, w = image.shape
    n = coords.shape[0]
    out = np.empty(n, dtype=np.float64)
    for k in range(n):
        x = min(max(coords[k, 0], 0.0), w - 1.0)
        y = min(max(coords[k, 1], 0.0), h - 1.0)
        x0 = min(int(np.floor(x)), w - 2)
        y0 = min(int(np.floor(y)), h - 2)
        fx = x - x0
        fy = y - y0
        out[k] = (
            (1.0 - fx) * (1.0 - fy) * image[y0, x0]
            + fx * (1.0 - fy) * image[y0, x0 + 1]
            + (1.0 - fx) * fy * image[y0 + 1, x0]
            + fx * fy * image[y0 + 1, x0 + 1]
        )
    return out


@njit(f8[:, :](f8[:, :], f8[:, :], f8[:]), cache=True)
def bilinear_sample_vjp(image, coords, g):
    h, w = image.shape
    n = coords.shape[0]
    grad = np.zeros((n, 2), dtype=np.float64)
    for k in range(n):
        cx = coords[k, 0]
        cy = coords[k, 1]
        x = min(max(cx, 0.0), w - 1.0)
        y = min(max(cy, 0.0), h - 1.0)
        x0 = min(int(np.floor(x)), w - 2)
        y0 = min(int(np.floor(y)), h - 2)
        fx = x - x0
        fy = y - y0
        i00 = image[y0, x0]
        i01 = image[y0, x0 + 1]
        i10 = image[y0 + 1, x0]
        i11 = image[y0 + 1, x0 + 1]
        # clamped coordinates carry no gradient
        if 0.0 <= cx <= w - 1.0:
            grad[k, 0] = g[k] * ((1.0 - fy) * (i01 - i00) + fy * (i11 - i10))
        if 0.0 <= cy <= h - 1.0:
            grad[k, 1] = g[k] * ((1.0 - fx) * (i10 - i00) + fx * (i11 - i01))
    return grad


def sample_image(image: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``image`` at (N, 2) coordinates, clamped to the border."""
    image = np.ascontiguousarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 2:
        raise validation.UserInputError("sampling needs a 2D image of at least 2x2 pixels")
    return bilinear_sample(image, np.ascontiguousarray(coords, dtype=np.float64))


def warp_image(source: Union[Image, np.ndarray], params: WarpParams) -> np.ndarray:
    """
    Backward warp: the output pixel x takes the source value at ``T(x)``.

    Parameters
    ----------
    source : Image or 2D array
        image to be warped
    params : WarpParams
        solved transform (target frame -> source frame)

    Returns
    -------
    numpy array
        registered image, same extent as ``source``
    """
    data = source.data if isinstance(source, Image) else np.asarray(source, dtype=np.float64)
    if data.ndim != 2:
        raise validation.UserInputError("only 2D images can be warped")
    coords = apply_transform(params, pixel_grid(data.shape))
    return sample_image(data, coords).reshape(data.shape)


# ----------------------------------------------------------------
#                     DIFFERENTIABLE VERSIONS
# ----------------------------------------------------------------


def _block_vjp(g, ans, points):
    m, d = points.shape
    grad = g[:d, :m].T.copy()
    grad += g[d + 1 :, m : m + d]
    diff, r = _pairwise(points, points)
    phi_bar = g[d + 1 :, :m]
    weight = (phi_bar + phi_bar.T) * _radial_factor(r)
    grad += np.einsum("ij,ijk->ik", weight, diff)
    return (grad,)


def _rhs_vjp(g, ans, points):
    d = points.shape[1]
    return (g[d + 1 :].copy(),)


def _features_vjp(g, ans, control_points, coords):
    m = control_points.shape[0]
    diff, r = _pairwise(coords, control_points)
    weight = g[:, :m] * _radial_factor(r)
    return (-np.einsum("qi,qik->ik", weight, diff),)


def _join_vjp(g, ans, learned, anchors):
    n = learned.shape[0]
    return (g[:n], np.zeros_like(anchors))


def _sample_vjp(g, ans, coords, image):
    return (bilinear_sample_vjp(image, np.ascontiguousarray(coords), np.ascontiguousarray(g)),)


TPS_BLOCK = Primitive("tps_block", system_block, _block_vjp)
TPS_RHS = Primitive("tps_rhs", system_rhs, _rhs_vjp)
TPS_FEATURES = Primitive(
    "tps_features", lambda c, coords: tps_features(c, coords), _features_vjp
)
JOIN_ANCHORS = Primitive(
    "join_anchors", lambda learned, anchors: np.vstack([learned, anchors]), _join_vjp
)
GRID_SAMPLE = Primitive("grid_sample", lambda coords, image: sample_image(image, coords), _sample_vjp)


def join_anchors(tape: Tape, learned: Var, anchors: Var) -> Var:
    """Stacks learned points and anchors; anchors never receive a gradient."""
    return tape.apply(JOIN_ANCHORS, learned, anchors)


def block_on_tape(tape: Tape, target_points: Var) -> Var:
    return tape.apply(TPS_BLOCK, target_points)


def rhs_on_tape(tape: Tape, source_points: Var) -> Var:
    return tape.apply(TPS_RHS, source_points)


def transform_on_tape(tape: Tape, control_points: Var, weights: Var, coords: np.ndarray) -> Var:
    features = tape.apply(TPS_FEATURES, control_points, coords=coords)
    return tp.matmul(tape, features, weights)


def sample_on_tape(tape: Tape, coords: Var, image: np.ndarray) -> Var:
    return tape.apply(
        GRID_SAMPLE, coords, image=np.ascontiguousarray(image, dtype=np.float64)
    )


def warp_on_tape(
    tape: Tape,
    source_points: Var,
    target_points: Var,
    source_image: np.ndarray,
    scale: Optional[float] = None,
) -> Tuple[Var, Var, Var]:
    """
    Records build, solve and warp of a pair on ``tape``.

    The system is solved in normalized coordinates (``scale`` defaults to
    :py:func:`coordinate_scale` of the image) and the sampling coordinates are
    scaled back to pixels.

    Returns
    -------
    registered : Var
        warped source image
    block : Var
        normalized TPS block (input of the condition regulariser)
    coords : Var
        (H * W, 2) sampling coordinates in the source frame
    """
    scale = coordinate_scale(source_image.shape) if scale is None else float(scale)
    source_unit = tp.scale(tape, source_points, 1.0 / scale)
    target_unit = tp.scale(tape, target_points, 1.0 / scale)
    block = block_on_tape(tape, target_unit)
    rhs = rhs_on_tape(tape, source_unit)
    weights = tp.lu_solve(tape, block, rhs)
    grid = pixel_grid(source_image.shape) / scale
    coords = tp.scale(tape, transform_on_tape(tape, target_unit, weights, grid), scale)
    values = sample_on_tape(tape, coords, source_image)
    return tp.reshape(tape, values, source_image.shape), block, coords
