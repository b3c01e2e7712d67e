"""
`Construct` module
==================

The `construct` module is used to construct all objects that
form the inputs to calculations in openlandmark.


These objects include:

- the LandmarkSet
- the Image and its Mask
- the MindConfig
- the Architecture of the landmark encoder
- the TrainConfig and the PairRecord

**Usage**

>>> from openlandmark.construct import LandmarkSet, Image, Mask, MindConfig, TrainConfig

"""

import itertools
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from typing_extensions import Literal
from pydantic import (
    Extra,
    PositiveInt,
    conint,
    confloat,
    root_validator,
    validator,
)
from pydantic.dataclasses import dataclass

import openlandmark.core.validation as validation

#: selectors accepted wherever an image matching loss is chosen
LossKind = Literal["l2", "ncc", "mind"]

#: radial basis kernels, only the 2D thin-plate spline is available
KernelKind = Literal["ThinPlate2D"]


class PydanticConfig:
    arbitrary_types_allowed = True
    extra = Extra.forbid
    post_init_call = "after_validation"


def _as_float_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


@dataclass(config=PydanticConfig)
class LandmarkSet:
    """
    An ordered set of control points in continuous pixel coordinates.

    The coordinate convention is (x = column, y = row) with the origin at the centre of
    pixel (0, 0). The index of a point defines its correspondence across images.
    Anchor points, when present, are always the last ``anchor_count`` points.

    Parameters
    ----------
    points : array-like of shape (M, d)
        landmark coordinates in pixel units, d = 2 (d = 3 accepted).
    anchor_count : int, optional
        number of fixed (non-learned) points at the end of ``points``, by default 0.

    Example
    -------

    >>> from openlandmark.construct import LandmarkSet
    >>> lms = LandmarkSet(points=[[10.0, 12.0], [30.5, 40.0], [50.0, 8.0]])
    >>> lms.n_points, lms.dim
    (3, 2)
    """

    #: (M, d) array of coordinates
    points: np.ndarray
    #: number of anchors appended at the end
    anchor_count: conint(ge=0) = 0

    @validator("points", pre=True)
    def _points_to_array(cls, value):  # pylint: disable=no-self-argument
        arr = _as_float_array(value)
        if arr.ndim != 2 or arr.shape[1] not in (2, 3) or arr.shape[0] < 1:
            raise ValueError(f"points must be an (M, 2) or (M, 3) array, got shape {arr.shape}")
        return arr

    @root_validator(skip_on_failure=True)
    def _check_anchors(cls, values):  # pylint: disable=no-self-argument
        if values["anchor_count"] >= values["points"].shape[0]:
            raise ValueError("anchor_count must be lower than the number of points")
        return values

    def __post_init__(self):
        validation.must_be_finite(self.points, "LandmarkSet.points")

    def __str__(self):
        return (
            f"LandmarkSet of {self.n_points} points in {self.dim}D "
            f"({self.anchor_count} anchors)"
        )

    @property
    def n_points(self) -> int:
        """Total number of points M (learned + anchors)."""
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        """Spatial dimension d."""
        return int(self.points.shape[1])

    @property
    def learned(self) -> np.ndarray:
        """Learned points only (anchors excluded)."""
        return self.points[: self.n_points - self.anchor_count]

    @property
    def anchors(self) -> np.ndarray:
        """Anchor points only."""
        return self.points[self.n_points - self.anchor_count :]

    def flatten(self) -> np.ndarray:
        """Landmark-major descriptor (x1, y1, x2, y2, ...)."""
        return self.points.reshape(-1).copy()


@dataclass(config=PydanticConfig)
class Image:
    """
    A scalar intensity image normalised to [0, 1].

    Parameters
    ----------
    data : array-like of shape (H, W) (or (D, H, W))
        row-major intensity grid, values must lie in [0, 1].

    Example
    -------

    >>> import numpy as np
    >>> from openlandmark.construct import Image
    >>> img = Image(data=np.zeros((4, 6)))
    >>> img.shape, img.extent
    ((4, 6), (6, 4))
    """

    #: intensity grid
    data: np.ndarray

    @validator("data", pre=True)
    def _data_to_array(cls, value):  # pylint: disable=no-self-argument
        arr = _as_float_array(value)
        if arr.ndim not in (2, 3):
            raise ValueError(f"image data must be 2D or 3D, got {arr.ndim} dimensions")
        return arr

    def __post_init__(self):
        validation.must_be_finite(self.data, "Image.data")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise validation.UserInputError("Image.data must be normalised to [0, 1]")

    @property
    def dim(self) -> int:
        return int(self.data.ndim)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def extent(self) -> Tuple[int, ...]:
        """Image extent in coordinate order (x extent first)."""
        return tuple(self.data.shape[::-1])


@dataclass(config=PydanticConfig)
class Mask:
    """
    A soft region-of-interest mask with values in [0, 1] used by the localized loss.

    Parameters
    ----------
    data : array-like
        mask grid with the same extent as the images it masks. At least one value
        must be strictly positive.
    """

    data: np.ndarray

    @validator("data", pre=True)
    def _data_to_array(cls, value):  # pylint: disable=no-self-argument
        return _as_float_array(value)

    def __post_init__(self):
        validation.must_be_finite(self.data, "Mask.data")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise validation.UserInputError("Mask.data must lie in [0, 1]")
        if not (self.data > 0).any():
            raise validation.UserInputError("Mask.data must have at least one positive value")


def default_displacements(radius: float = 5.0, dim: int = 2) -> List[Tuple[int, ...]]:
    """4-neighbourhood (2D) or 6-neighbourhood (3D) displacements of length ``radius``."""
    r = int(round(radius))
    out = []
    for axis in range(dim):
        for sign in (1, -1):
            v = [0] * dim
            v[axis] = sign * r
            out.append(tuple(v))
    return out


@dataclass(config=PydanticConfig)
class MindConfig:
    """
    Parameters of the modality independent neighbourhood descriptor.

    Parameters
    ----------
    patch_size : int
        odd isotropic patch size p, by default 3.
    displacements : list of integer vectors
        displacement set R in (x, y) order, by default the 4-neighbourhood at distance 5.
    variance_floor : float
        positive constant added to the local patch variance, by default 1e-6.

    Example
    -------

    >>> from openlandmark.construct import MindConfig
    >>> MindConfig().displacements
    [(5, 0), (-5, 0), (0, 5), (0, -5)]
    """

    patch_size: PositiveInt = 3
    displacements: List[Tuple[int, ...]] = None
    variance_floor: confloat(gt=0.0) = 1e-6

    @validator("patch_size")
    def _odd_patch(cls, value):  # pylint: disable=no-self-argument
        if value % 2 == 0:
            raise ValueError("patch_size must be odd")
        return value

    @validator("displacements", always=True)
    def _nonzero_displacements(cls, value):  # pylint: disable=no-self-argument
        if value is None:
            return default_displacements()
        if len(value) == 0:
            raise ValueError("displacements must not be empty")
        for r in value:
            if not any(r):
                raise ValueError("displacements must be nonzero vectors")
        return [tuple(int(c) for c in r) for r in value]

    @property
    def displacement_array(self) -> np.ndarray:
        return np.array(self.displacements, dtype=np.int64)


@dataclass(config=PydanticConfig)
class Architecture:
    """
    Descriptor of the convolutional landmark encoder.

    Parameters
    ----------
    input_shape : (int, int)
        expected image shape (rows, columns), by default (128, 128).
    n_landmarks : int
        number M of learned landmarks, by default 16.
    channels : tuple of int
        channel width of each convolution block, by default (16, 32, 64, 128).
    layers_per_block : tuple of int
        number of 3x3 convolutions per block, by default (2, 2, 4, 4).
    head_hidden : int
        width of the hidden fully-connected layer, 0 for a single output layer.
        By default 256.
    """

    input_shape: Tuple[PositiveInt, PositiveInt] = (128, 128)
    n_landmarks: PositiveInt = 16
    channels: Tuple[PositiveInt, ...] = (16, 32, 64, 128)
    layers_per_block: Tuple[PositiveInt, ...] = (2, 2, 4, 4)
    head_hidden: conint(ge=0) = 256

    @root_validator(skip_on_failure=True)
    def _check_blocks(cls, values):  # pylint: disable=no-self-argument
        if len(values["channels"]) != len(values["layers_per_block"]):
            raise ValueError("channels and layers_per_block must have the same length")
        factor = 2 ** len(values["channels"])
        for n in values["input_shape"]:
            if n % factor != 0:
                raise ValueError(
                    f"input extent {n} must be divisible by 2**{len(values['channels'])}"
                )
        return values

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        """(channels, rows, columns) of the last block output."""
        factor = 2 ** len(self.channels)
        return (
            self.channels[-1],
            self.input_shape[0] // factor,
            self.input_shape[1] // factor,
        )

    def to_dict(self) -> Dict:
        return {
            "input_shape": list(self.input_shape),
            "n_landmarks": self.n_landmarks,
            "channels": list(self.channels),
            "layers_per_block": list(self.layers_per_block),
            "head_hidden": self.head_hidden,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "Architecture":
        return cls(
            input_shape=tuple(d["input_shape"]),
            n_landmarks=d["n_landmarks"],
            channels=tuple(d["channels"]),
            layers_per_block=tuple(d["layers_per_block"]),
            head_hidden=d["head_hidden"],
        )


@dataclass(config=PydanticConfig)
class TrainConfig:
    """
    Hyper-parameters of a training run.

    Every field can be given in a flat ``key = value`` config file, see
    :py:meth:`TrainConfig.from_file`.

    Example
    -------

    >>> from openlandmark.construct import TrainConfig
    >>> cfg = TrainConfig(lam=0.005, loss_kind="mind", epochs=5)
    >>> cfg.variant
    'plain'
    """

    #: weight of the condition-number regulariser (lambda)
    lam: confloat(ge=0.0) = 0.005
    #: weight of the segmentation term of the weakly supervised variant
    beta: confloat(ge=0.0) = 1.0
    #: image matching loss
    loss_kind: LossKind = "l2"
    #: loss variant
    variant: Literal["plain", "weak", "localized"] = "plain"
    #: matching loss used between segmentations (weak variant)
    seg_loss_kind: LossKind = "l2"
    #: box (x0, y0, x1, y1) of the localized variant mask, inclusive pixel bounds
    mask_box: Optional[Tuple[int, int, int, int]] = None
    #: gaussian blur applied to the mask box border
    mask_sigma: confloat(ge=0.0) = 2.0
    epochs: PositiveInt = 20
    batch_pairs: PositiveInt = 20
    learning_rate: confloat(ge=0.0) = 1e-4
    adam_beta1: confloat(ge=0.0, lt=1.0) = 0.9
    adam_beta2: confloat(ge=0.0, lt=1.0) = 0.999
    adam_eps: confloat(gt=0.0) = 1e-8
    pair_strategy: Literal["all_pairs", "random_k"] = "all_pairs"
    #: number of pairs drawn by the random_k strategy
    pair_count: Optional[PositiveInt] = None
    #: cap on the number of training pairs per epoch
    max_pairs: Optional[PositiveInt] = 2000
    #: cap on the number of validation pairs
    val_max_pairs: PositiveInt = 200
    seed: int = 0
    early_stop_patience: PositiveInt = 5
    n_landmarks: PositiveInt = 16
    #: number of corner anchors, 0 or 4
    anchors: conint(ge=0) = 4
    ncc_patch: PositiveInt = 5
    mind_patch: PositiveInt = 3
    mind_radius: confloat(gt=0.0) = 5.0
    #: number of threads evaluating the pairs of a batch
    workers: PositiveInt = 1
    channels: Tuple[PositiveInt, ...] = (16, 32, 64, 128)
    layers_per_block: Tuple[PositiveInt, ...] = (2, 2, 4, 4)
    head_hidden: conint(ge=0) = 256
    #: feature CSV whose column means initialise the encoder output (optional)
    init_landmarks: Optional[str] = None

    @validator("anchors")
    def _anchor_count(cls, value):  # pylint: disable=no-self-argument
        if value not in (0, 4):
            raise ValueError("anchors must be 0 or 4 for 2D images")
        return value

    @root_validator(skip_on_failure=True)
    def _check_variant(cls, values):  # pylint: disable=no-self-argument
        if values["variant"] == "localized" and values["mask_box"] is None:
            raise ValueError("the localized variant needs a mask_box")
        if values["pair_strategy"] == "random_k" and values["pair_count"] is None:
            raise ValueError("the random_k strategy needs a pair_count")
        for p in (values["ncc_patch"], values["mind_patch"]):
            if p % 2 == 0:
                raise ValueError("patch sizes must be odd")
        return values

    @property
    def mind(self) -> MindConfig:
        return MindConfig(
            patch_size=self.mind_patch, displacements=default_displacements(self.mind_radius)
        )

    def architecture(self, input_shape: Tuple[int, int]) -> Architecture:
        return Architecture(
            input_shape=tuple(input_shape),
            n_landmarks=self.n_landmarks,
            channels=tuple(self.channels),
            layers_per_block=tuple(self.layers_per_block),
            head_hidden=self.head_hidden,
        )

    def replace(self, **changes) -> "TrainConfig":
        """Copy of the config with some fields changed (validated again)."""
        return TrainConfig(**{**self.to_dict(), **changes})

    def to_dict(self) -> Dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TrainConfig":
        """Reads a flat ``key = value`` config file.

        Blank lines and lines starting with ``#`` are ignored, ``lambda`` is accepted
        as an alias of ``lam``, comma separated values are read as tuples and
        ``none`` as a missing value.

        Parameters
        ----------
        path : str or Path
            config file

        Returns
        -------
        TrainConfig
        """
        tuple_fields = {"channels", "layers_per_block", "mask_box"}
        values = {}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise validation.UserInputError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "lambda":
                key = "lam"
            if value.lower() in ("none", ""):
                values[key] = None
            elif key in tuple_fields:
                values[key] = tuple(int(v) for v in value.split(","))
            else:
                values[key] = value
        return cls(**values)


@dataclass(config=PydanticConfig)
class PairRecord:
    """
    An ordered (source, target) training pair.

    Segmentation ids are given only when the corresponding segmentation exists.
    """

    source: str
    target: str
    source_seg: Optional[str] = None
    target_seg: Optional[str] = None

    @root_validator(skip_on_failure=True)
    def _distinct(cls, values):  # pylint: disable=no-self-argument
        if values["source"] == values["target"]:
            raise ValueError("source and target of a pair must differ")
        return values

    @property
    def has_segmentations(self) -> bool:
        return self.source_seg is not None and self.target_seg is not None


def corner_points(extent: Tuple[int, ...]) -> np.ndarray:
    """All 2**d corners of an image of the given extent (coordinate order).

    The first coordinate varies fastest, e.g. (0, 0), (W-1, 0), (0, H-1), (W-1, H-1).
    """
    axes = [(0.0, float(n - 1)) for n in extent]
    corners = [c[::-1] for c in itertools.product(*axes[::-1])]
    return np.array(corners, dtype=np.float64)
