"""
Synthetic shape images.

Three families of smooth closed shapes on a dark background:

- ``ellipse``: an elongated ellipse
- ``lobed``: a four-lobed outline
- ``deformed``: the ellipse with a localized bump, used as an anomaly class

Every sample gets a random rotation (at most 10 degrees), translation (at most
5 px at 128x128, scaled with the image size), scale (+-10 %) and gaussian noise
(sigma 0.02). The binary shape mask is kept as segmentation.
"""

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

from openlandmark.core import validation
from openlandmark.dataset import Dataset, Manifest
from openlandmark.utils import imageio

logger = logging.getLogger(__name__)

FAMILIES = ["ellipse", "lobed", "deformed"]

BACKGROUND = 0.1
FOREGROUND = 0.8
NOISE_SIGMA = 0.02
MAX_ROTATION_DEG = 10.0
MAX_TRANSLATION_PX = 5.0
SCALE_RANGE = 0.1


def _ellipse_radius(theta: np.ndarray, a: float, b: float) -> np.ndarray:
    return a * b / np.sqrt((b * np.cos(theta)) ** 2 + (a * np.sin(theta)) ** 2)


def _outline(family: str, theta: np.ndarray, unit: float) -> np.ndarray:
    if family == "ellipse":
        return _ellipse_radius(theta, 40 * unit, 22 * unit)
    if family == "lobed":
        return 30 * unit * (1.0 + 0.25 * np.cos(4 * theta))
    bump = np.angle(np.exp(1j * (theta - np.pi / 4)))
    return _ellipse_radius(theta, 40 * unit, 22 * unit) + 12 * unit * np.exp(-(bump**2) / (2 * 0.3**2))


def make_sample(family: str, rng: np.random.Generator, size: int = 128) -> Tuple[np.ndarray, np.ndarray]:
    """
    One random sample of a family.

    Returns
    -------
    image : (size, size) array in [0, 1]
    mask : (size, size) binary array
    """
    validation.str_must_be_one_of_those(family, "shape family", FAMILIES)
    unit = size / 128.0
    angle = np.deg2rad(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    shift = rng.uniform(-MAX_TRANSLATION_PX, MAX_TRANSLATION_PX, size=2) * unit
    scale = rng.uniform(1.0 - SCALE_RANGE, 1.0 + SCALE_RANGE)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2.0
    # pixel coordinates expressed in the shape frame
    u = xs - centre - shift[0]
    v = ys - centre - shift[1]
    c, s = np.cos(angle), np.sin(angle)
    xr = (c * u + s * v) / scale
    yr = (-s * u + c * v) / scale
    rho = np.hypot(xr, yr)
    theta = np.arctan2(yr, xr)
    mask = (rho <= _outline(family, theta, unit)).astype(np.float64)

    image = BACKGROUND + (FOREGROUND - BACKGROUND) * gaussian_filter(mask, sigma=1.5 * unit)
    image = image + rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    return np.clip(image, 0.0, 1.0), mask


def _split_labels(n: int, rng: np.random.Generator) -> List[str]:
    n_val = int(round(0.1 * n))
    n_test = int(round(0.1 * n))
    labels = ["train"] * (n - n_val - n_test) + ["val"] * n_val + ["test"] * n_test
    return [labels[i] for i in np.argsort(rng.permutation(n))]


def synthetic_samples(
    n_per_class: int, seed: int = 0, classes: Sequence[str] = ("ellipse", "lobed"), size: int = 128
) -> List[Dict]:
    """Records ``id, family, split, image, mask`` of a deterministic synthetic corpus."""
    if n_per_class < 2:
        raise validation.UserInputError("at least 2 samples per class are needed")
    records = []
    for k, family in enumerate(classes):
        validation.str_must_be_one_of_those(family, "shape family", FAMILIES)
        rng = np.random.default_rng([seed, k])
        splits = _split_labels(n_per_class, rng)
        for i in range(n_per_class):
            image, mask = make_sample(family, rng, size)
            records.append(
                {"id": f"{family}_{i:03d}", "family": family, "split": splits[i], "image": image, "mask": mask}
            )
    return records


def synthetic_dataset(
    n_per_class: int, seed: int = 0, classes: Sequence[str] = ("ellipse", "lobed"), size: int = 128
) -> Dataset:
    """In-memory synthetic corpus, segmentations included, images quantised like the PNG files."""
    records = synthetic_samples(n_per_class, seed, classes, size)
    return Dataset(
        images={r["id"]: imageio.to_uint8(r["image"]) / 255.0 for r in records},
        splits={r["id"]: r["split"] for r in records},
        segmentations={r["id"]: r["mask"] for r in records},
        labels={r["id"]: r["family"] for r in records},
    )


def generate(
    out_dir: Union[str, Path],
    n_per_class: int,
    seed: int = 0,
    classes: Sequence[str] = ("ellipse", "lobed", "deformed"),
    size: int = 128,
) -> Path:
    """
    Writes a synthetic corpus as PNG images, PNG masks and a manifest.

    Returns
    -------
    Path
        path of ``manifest.csv`` in ``out_dir``
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise validation.UserInputError(f"cannot write to {out_dir}: {err}") from err
    rows = []
    for r in synthetic_samples(n_per_class, seed, classes, size):
        image_rel = f"images/{r['id']}.png"
        mask_rel = f"masks/{r['id']}.png"
        imageio.write_png(out_dir / image_rel, r["image"])
        imageio.write_png(out_dir / mask_rel, r["mask"])
        rows.append(
            {"id": r["id"], "image": image_rel, "split": r["split"], "segmentation": mask_rel, "label": r["family"]}
        )
    manifest = Manifest(records=pd.DataFrame(rows), image_size=(size, size), normalization="unit")
    path = manifest.write(out_dir / "manifest.csv")
    logger.info("wrote %d synthetic images to %s", len(rows), out_dir)
    return path
