"""
`Encoder` module
================

The convolutional landmark encoder and its checkpoint container.

The encoder maps an image to M landmarks. It is made of blocks of 3x3
convolutions (same padding, ReLU) each followed by a 2x2 max-pool, a fully
connected head and a tanh output mapped to pixel coordinates. The same
parameters encode the source and the target of a pair.

**Usage**

>>> import numpy as np
>>> from openlandmark.construct import Architecture
>>> from openlandmark.encoder import init_params, encode
>>> arch = Architecture(input_shape=(16, 16), n_landmarks=5, channels=(4, 8), layers_per_block=(1, 1), head_hidden=0)
>>> params = init_params(0, arch)
>>> encode(params, np.zeros((16, 16))).n_points
5
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from openlandmark.construct import Architecture, Image, LandmarkSet, corner_points
from openlandmark.core import validation
from openlandmark.core.misc import atomic_path
from openlandmark.core.tape import Primitive, Tape, Var
from openlandmark.core import tape as tp
from openlandmark.globals import CHECKPOINT_FORMAT, VERSION

logger = logging.getLogger(__name__)

#: value of the ``format`` key of a checkpoint header
CHECKPOINT_KIND = "openlandmark-checkpoint"


# ----------------------------------------------------------------
#                          LAYERS
# ----------------------------------------------------------------


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded 2D convolution, x (N, C, H, W), weight (O, C, k, k)."""
    out = np.tensordot(_windows(x, weight.shape[-1]), weight, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + bias[None, :, None, None]


def _conv2d_vjp(g, ans, x, weight, bias):
    k = weight.shape[-1]
    gx = np.tensordot(_windows(g, k), weight[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    gw = np.tensordot(g, _windows(x, k), axes=([0, 2, 3], [0, 2, 3]))
    return (gx.transpose(0, 3, 1, 2), gw, g.sum(axis=(0, 2, 3)))


def _pool_view(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2 max-pool with stride 2."""
    return _pool_view(x).max(axis=-1)


def _maxpool2_vjp(g, ans, x):
    n, c, h, w = x.shape
    first = np.argmax(_pool_view(x), axis=-1)[..., None]
    grad = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(grad, first, g[..., None], axis=-1)
    grad = grad.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return (grad.reshape(n, c, h, w),)


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x @ weight + bias


def _dense_vjp(g, ans, x, weight, bias):
    return (g @ weight.T, x.T @ g, g.sum(axis=0))


CONV2D = Primitive("conv2d", conv2d, _conv2d_vjp)
MAXPOOL2 = Primitive("maxpool2", maxpool2, _maxpool2_vjp)
DENSE = Primitive("dense", dense, _dense_vjp)


# ----------------------------------------------------------------
#                         PARAMETERS
# ----------------------------------------------------------------


@dataclass
class EncoderParams:
    """Encoder weights and the architecture they belong to.

    ``weights`` is ordered: convolution blocks first, then the head.
    """

    architecture: Architecture
    weights: Dict[str, np.ndarray]

    def __post_init__(self):
        for name, w in self.weights.items():
            validation.must_be_finite(w, f"encoder parameter {name}")

    @property
    def names(self) -> List[str]:
        return list(self.weights)

    @property
    def n_parameters(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights.values()])

    def unflatten(self, vector: np.ndarray) -> "EncoderParams":
        """New parameters of the same architecture from a flat vector."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.n_parameters:
            raise validation.UserInputError(
                f"expected {self.n_parameters} parameters, got {vector.size}"
            )
        weights, start = {}, 0
        for name, w in self.weights.items():
            weights[name] = vector[start : start + w.size].reshape(w.shape).copy()
            start += w.size
        return EncoderParams(architecture=self.architecture, weights=weights)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            architecture=self.architecture,
            weights={k: v.copy() for k, v in self.weights.items()},
        )


def _output_scale(arch: Architecture) -> np.ndarray:
    h, w = arch.input_shape
    return np.tile([(w - 1) / 2.0, (h - 1) / 2.0], arch.n_landmarks)


def init_params(
    seed: int, arch: Architecture, mean_landmarks: Optional[Union[LandmarkSet, np.ndarray]] = None
) -> EncoderParams:
    """
    Seeded fan-in uniform initialisation.

    Layers followed by a ReLU draw from ``U(-sqrt(6 / fan_in), sqrt(6 / fan_in))``,
    the output layer from ``U(-sqrt(1 / fan_in), sqrt(1 / fan_in))``, biases are zero.

    Parameters
    ----------
    seed : int
        random seed
    arch : Architecture
        encoder descriptor
    mean_landmarks : LandmarkSet or (M, 2) array, optional
        when given, the output layer weights are zeroed and its bias set so that
        every image encodes to these landmarks.

    Returns
    -------
    EncoderParams
    """
    rng = np.random.default_rng(seed)
    weights: Dict[str, np.ndarray] = {}
    c_in = 1
    for b, (c_out, n_layers) in enumerate(zip(arch.channels, arch.layers_per_block)):
        for layer in range(n_layers):
            bound = np.sqrt(6.0 / (c_in * 9))
            weights[f"block{b}.conv{layer}.weight"] = rng.uniform(-bound, bound, (c_out, c_in, 3, 3))
            weights[f"block{b}.conv{layer}.bias"] = np.zeros(c_out)
            c_in = c_out

    fan_in = int(np.prod(arch.feature_shape))
    if arch.head_hidden > 0:
        bound = np.sqrt(6.0 / fan_in)
        weights["head.hidden.weight"] = rng.uniform(-bound, bound, (fan_in, arch.head_hidden))
        weights["head.hidden.bias"] = np.zeros(arch.head_hidden)
        fan_in = arch.head_hidden
    bound = np.sqrt(1.0 / fan_in)
    n_out = 2 * arch.n_landmarks
    weights["head.out.weight"] = rng.uniform(-bound, bound, (fan_in, n_out))
    weights["head.out.bias"] = np.zeros(n_out)

    if mean_landmarks is not None:
        pts = mean_landmarks.points if isinstance(mean_landmarks, LandmarkSet) else mean_landmarks
        pts = np.asarray(pts, dtype=np.float64)
        if pts.shape != (arch.n_landmarks, 2):
            raise validation.UserInputError(
                f"mean landmarks must have shape ({arch.n_landmarks}, 2), got {pts.shape}"
            )
        normalized = pts.reshape(-1) / _output_scale(arch) - 1.0
        weights["head.out.weight"][:] = 0.0
        weights["head.out.bias"] = np.arctanh(np.clip(normalized, -(1 - 1e-12), 1 - 1e-12))
    return EncoderParams(architecture=arch, weights=weights)


# ----------------------------------------------------------------
#                          FORWARD
# ----------------------------------------------------------------


def param_leaves(tape: Tape, params: EncoderParams, prefix: str = "") -> Dict[str, Var]:
    """Registers every parameter as a named leaf of ``tape``."""
    return {name: tape.leaf(w, prefix + name) for name, w in params.weights.items()}


def param_constants(tape: Tape, params: EncoderParams) -> Dict[str, Var]:
    return {name: tape.constant(w) for name, w in params.weights.items()}


def encode_on_tape(
    tape: Tape, params: Dict[str, Var], arch: Architecture, images: np.ndarray
) -> Var:
    """Records the forward pass of an (N, H, W) stack, output (N, M, 2) pixel coordinates."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1:] != tuple(arch.input_shape):
        raise validation.UserInputError(
            f"encoder expects images of shape {tuple(arch.input_shape)}, got {images.shape[1:]}"
        )
    n = images.shape[0]
    x = tape.constant(images[:, None])
    for b, n_layers in enumerate(arch.layers_per_block):
        for layer in range(n_layers):
            name = f"block{b}.conv{layer}"
            x = tp.relu(tape, tape.apply(CONV2D, x, params[name + ".weight"], params[name + ".bias"]))
        x = tape.apply(MAXPOOL2, x)
    x = tp.reshape(tape, x, (n, int(np.prod(arch.feature_shape))))
    if arch.head_hidden > 0:
        x = tp.relu(
            tape, tape.apply(DENSE, x, params["head.hidden.weight"], params["head.hidden.bias"])
        )
    x = tp.tanh(tape, tape.apply(DENSE, x, params["head.out.weight"], params["head.out.bias"]))
    scale = _output_scale(arch)
    x = tp.affine(tape, x, scale=scale, shift=scale)
    return tp.reshape(tape, x, (n, arch.n_landmarks, 2))


def encode_batch(params: EncoderParams, images: np.ndarray) -> np.ndarray:
    """Learned landmarks of an (N, H, W) stack, shape (N, M, 2)."""
    tape = Tape()
    return encode_on_tape(tape, param_constants(tape, params), params.architecture, images).value


def encode(params: EncoderParams, img: Union[Image, np.ndarray]) -> LandmarkSet:
    """
    Learned landmarks of one image (anchors excluded).

    Raises
    ------
    UserInputError
        if the image shape differs from the architecture input shape
    """
    data = img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    return LandmarkSet(points=encode_batch(params, data[None])[0])


# ----------------------------------------------------------------
#                         CHECKPOINT
# ----------------------------------------------------------------


@dataclass
class Checkpoint:
    """Trained encoder plus everything needed to produce landmarks for new images."""

    params: EncoderParams
    #: number of corner anchors appended to the learned landmarks
    anchors: int = 4
    #: learned landmarks kept after pruning, all of them when None
    active_indices: Optional[List[int]] = None
    metadata: Dict = field(default_factory=dict)
    #: rows of the pruning report, when the checkpoint was pruned
    prune_report: Optional[List[Dict]] = None

    @property
    def architecture(self) -> Architecture:
        return self.params.architecture

    @property
    def image_shape(self):
        return tuple(self.architecture.input_shape)

    @property
    def active(self) -> List[int]:
        if self.active_indices is None:
            return list(range(self.architecture.n_landmarks))
        return list(self.active_indices)

    @property
    def anchor_points(self) -> np.ndarray:
        if self.anchors == 0:
            return np.zeros((0, 2))
        return corner_points(self.image_shape[::-1])

    def landmarks(self, images: np.ndarray) -> np.ndarray:
        """Active learned landmarks followed by the anchors, shape (N, m + anchors, 2)."""
        learned = encode_batch(self.params, images)[:, self.active]
        anchors = np.broadcast_to(self.anchor_points, (learned.shape[0],) + self.anchor_points.shape)
        return np.concatenate([learned, anchors], axis=1)

    def landmark_sets(self, images: np.ndarray) -> List[LandmarkSet]:
        return [LandmarkSet(points=p, anchor_count=self.anchors) for p in self.landmarks(images)]

    def header(self) -> Dict:
        return {
            "format": CHECKPOINT_KIND,
            "version": CHECKPOINT_FORMAT,
            "package_version": VERSION,
            "architecture": self.architecture.to_dict(),
            "anchors": self.anchors,
            "image_shape": list(self.image_shape),
            "active_indices": self.active_indices,
            "parameters": self.params.names,
            "metadata": self.metadata,
            "prune_report": self.prune_report,
        }


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """
    Writes a checkpoint container (``.npz``) atomically.

    Member ``header`` holds the JSON header, members ``param/<name>`` the float64
    parameter arrays.
    """
    path = Path(path)
    members = {"header": np.array(json.dumps(checkpoint.header(), sort_keys=True))}
    for name, w in checkpoint.params.weights.items():
        members[f"param/{name}"] = np.asarray(w, dtype=np.float64)
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            np.savez(f, **members)
    logger.info("checkpoint written to %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Reads a checkpoint written by :py:func:`save_checkpoint`.

    Raises
    ------
    UserInputError
        if the file is not a checkpoint or has a newer format version
    """
    path = Path(path)
    if not path.exists():
        raise validation.UserInputError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as data:
        if "header" not in data.files:
            raise validation.UserInputError(f"{path} is not an openlandmark checkpoint")
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_KIND:
            raise validation.UserInputError(f"{path} is not an openlandmark checkpoint")
        if header["version"] > CHECKPOINT_FORMAT:
            raise validation.UserInputError(
                f"{path} has checkpoint format {header['version']}, "
                f"this version reads up to {CHECKPOINT_FORMAT}"
            )
        weights = {name: np.array(data[f"param/{name}"]) for name in header["parameters"]}
    params = EncoderParams(
        architecture=Architecture.from_dict(header["architecture"]), weights=weights
    )
    return Checkpoint(
        params=params,
        anchors=header["anchors"],
        active_indices=header["active_indices"],
        metadata=header["metadata"],
        prune_report=header["prune_report"],
    )
