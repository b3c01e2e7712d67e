"""
`Dataset` module
================

Image collections and the manifest file describing them.

A manifest is a CSV file with the header ``id,image,split,segmentation,label``
optionally preceded by ``# key=value`` settings lines:

.. code-block:: text

    # image_size=128x128
    # normalization=unit
    id,image,split,segmentation,label
    ellipse_000,images/ellipse_000.png,train,masks/ellipse_000.png,ellipse

Relative paths are resolved against the directory of the manifest.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from openlandmark.core import validation
from openlandmark.core.misc import atomic_path
from openlandmark.utils import imageio

logger = logging.getLogger(__name__)

SPLITS = ["train", "val", "test"]
COLUMNS = ["id", "image", "split", "segmentation", "label"]


@dataclass
class Manifest:
    """Parsed manifest: one record per image plus the global settings."""

    records: pd.DataFrame
    image_size: Optional[Tuple[int, int]] = None
    normalization: str = "unit"
    root: Path = Path(".")

    def __post_init__(self):
        missing = [c for c in ("id", "image", "split") if c not in self.records.columns]
        if missing:
            raise validation.UserInputError(f"manifest is missing columns {missing}")
        for c in ("segmentation", "label"):
            if c not in self.records.columns:
                self.records[c] = ""
        self.records = self.records[COLUMNS].fillna("").astype(str)
        dup = self.records["id"][self.records["id"].duplicated()]
        if len(dup):
            raise validation.UserInputError(f"duplicate ids in manifest: {sorted(set(dup))}")
        bad = sorted(set(self.records["split"]) - set(SPLITS))
        if bad:
            raise validation.UserInputError(f"unknown splits {bad}, expected one of {SPLITS}")
        validation.str_must_be_one_of_those(
            self.normalization, "normalization", ["unit", "minmax"]
        )

    def __len__(self):
        return len(self.records)

    def resolve(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else self.root / p

    @classmethod
    def read(cls, path: Union[str, Path]) -> "Manifest":
        """Reads a manifest file and checks every referenced file exists."""
        path = Path(path)
        if not path.exists():
            raise validation.UserInputError(f"manifest {path} does not exist")
        settings, n_header = {}, 0
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.startswith("#"):
                break
            n_header += 1
            if "=" in line:
                key, value = (s.strip() for s in line[1:].split("=", 1))
                settings[key] = value
        records = pd.read_csv(path, skiprows=n_header, dtype=str, keep_default_na=False)
        image_size = None
        if "image_size" in settings:
            h, w = settings["image_size"].lower().split("x")
            image_size = (int(h), int(w))
        manifest = cls(
            records=records,
            image_size=image_size,
            normalization=settings.get("normalization", "unit"),
            root=path.parent,
        )
        for column in ("image", "segmentation"):
            for rel in manifest.records[column]:
                if rel and not manifest.resolve(rel).exists():
                    raise validation.UserInputError(f"file {rel} listed in {path} does not exist")
        return manifest

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        lines = []
        if self.image_size is not None:
            lines.append(f"# image_size={self.image_size[0]}x{self.image_size[1]}\n")
        lines.append(f"# normalization={self.normalization}\n")
        with atomic_path(path) as tmp:
            with open(tmp, "w", encoding="utf-8", newline="") as f:
                f.writelines(lines)
                self.records.to_csv(f, index=False)
        return path


@dataclass
class Dataset:
    """
    Images normalised to [0, 1], indexed by id, with their split, optional
    segmentation and optional class label.
    """

    images: Dict[str, np.ndarray]
    splits: Dict[str, str]
    segmentations: Dict[str, np.ndarray] = field(default_factory=dict)
    labels: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.images:
            raise validation.UserInputError("a dataset needs at least one image")
        shapes = {img.shape for img in self.images.values()}
        if len(shapes) != 1:
            raise validation.UserInputError(f"all images must have the same shape, got {shapes}")
        for key, seg in self.segmentations.items():
            validation.extents_must_match(
                self.images[key], seg, f"image {key}", f"segmentation {key}"
            )

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self) -> Tuple[int, int]:
        return next(iter(self.images.values())).shape

    def ids(self, split: Optional[str] = None, label: Optional[str] = None) -> List[str]:
        """Ids in insertion order, optionally restricted to a split and/or a label."""
        return [
            i
            for i in self.images
            if (split is None or self.splits[i] == split)
            and (label is None or self.labels.get(i) == label)
        ]

    def stack(self, ids: List[str]) -> np.ndarray:
        return np.stack([self.images[i] for i in ids])

    def require_trainable(self):
        for split in ("train", "val"):
            if len(self.ids(split)) < 2:
                raise validation.UserInputError(
                    f"split '{split}' needs at least 2 images to build pairs"
                )

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "Dataset":
        images, splits, segs, labels = {}, {}, {}, {}
        for rec in manifest.records.itertuples(index=False):
            img = imageio.read_image(manifest.resolve(rec.image), manifest.normalization)
            if manifest.image_size is not None and img.shape != tuple(manifest.image_size):
                raise validation.UserInputError(
                    f"image {rec.id} has shape {img.shape}, manifest says {manifest.image_size}"
                )
            images[rec.id] = img
            splits[rec.id] = rec.split
            if rec.segmentation:
                segs[rec.id] = (
                    imageio.read_image(manifest.resolve(rec.segmentation), "unit") > 0.5
                ).astype(np.float64)
            if rec.label:
                labels[rec.id] = rec.label
        logger.info("loaded %d images from manifest", len(images))
        return cls(images=images, splits=splits, segmentations=segs, labels=labels)

    @classmethod
    def read(cls, path: Union[str, Path]) -> "Dataset":
        return cls.from_manifest(Manifest.read(path))
