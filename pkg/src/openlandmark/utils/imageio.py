"""
Reading and writing images.

Grayscale PNG and PGM files are read through Pillow and normalised to [0, 1];
images are written as 8-bit PNG. Float images that must survive a round-trip
exactly (mean shape images) go to the raw sidecar format:

- 8 bytes magic ``b"OLRAW001"``
- little-endian uint32 number of dimensions, then one uint32 per dimension
- little-endian float64 data in row-major order
"""

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image as PILImage
from typing_extensions import Literal

from openlandmark.core import validation
from openlandmark.core.misc import atomic_path

RAW_MAGIC = b"OLRAW001"

Normalization = Literal["unit", "minmax"]


def normalize(data: np.ndarray, mode: Normalization = "unit") -> np.ndarray:
    """
    Maps raw pixel values to [0, 1].

    ``unit`` divides integer images by the largest value of their type and clips
    float images, ``minmax`` rescales each image by its own range (a constant image
    becomes all zeros).
    """
    validation.str_must_be_one_of_those(mode, "normalization", ["unit", "minmax"])
    if mode == "minmax":
        data = np.asarray(data, dtype=np.float64)
        lo, hi = data.min(), data.max()
        if hi == lo:
            return np.zeros_like(data)
        return (data - lo) / (hi - lo)
    if np.issubdtype(np.asarray(data).dtype, np.integer):
        return np.asarray(data, dtype=np.float64) / np.iinfo(np.asarray(data).dtype).max
    return np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)


def read_image(path: Union[str, Path], mode: Normalization = "unit") -> np.ndarray:
    """Reads a grayscale image file as a float64 array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise validation.UserInputError(f"image {path} does not exist")
    with PILImage.open(path) as img:
        if img.mode not in ("L", "I;16", "I", "F"):
            img = img.convert("L")
        data = np.array(img)
    return normalize(data, mode)


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: Union[str, Path], data: np.ndarray) -> Path:
    """Writes a [0, 1] float image as an 8-bit grayscale PNG (atomic)."""
    path = Path(path)
    with atomic_path(path) as tmp:
        PILImage.fromarray(to_uint8(data)).save(tmp, format="PNG")
    return path


def write_raw_image(path: Union[str, Path], data: np.ndarray) -> Path:
    """Writes a float image in the raw sidecar format (atomic)."""
    data = np.ascontiguousarray(data, dtype="<f8")
    path = Path(path)
    header = RAW_MAGIC + np.array([data.ndim, *data.shape], dtype="<u4").tobytes()
    with atomic_path(path) as tmp:
        tmp.write_bytes(header + data.tobytes(order="C"))
    return path


def read_raw_image(path: Union[str, Path]) -> np.ndarray:
    """Reads an image written by :py:func:`write_raw_image`."""
    buffer = Path(path).read_bytes()
    if buffer[:8] != RAW_MAGIC:
        raise validation.UserInputError(f"{path} is not a raw openlandmark image")
    ndim = int(np.frombuffer(buffer, dtype="<u4", count=1, offset=8)[0])
    shape = tuple(int(n) for n in np.frombuffer(buffer, dtype="<u4", count=ndim, offset=12))
    offset = 12 + 4 * ndim
    expected = offset + 8 * int(np.prod(shape))
    if len(buffer) != expected:
        raise validation.UserInputError(
            f"{path} holds {len(buffer)} bytes, expected {expected} for shape {shape}"
        )
    return np.frombuffer(buffer, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)
