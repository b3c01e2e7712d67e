"""
`Prune` module
==============

Greedy removal of redundant landmarks after training.

The importance of a landmark is the increase of the mean registration loss over a
set of evaluation pairs when that landmark alone is left out of the control
points. The least important landmark is removed, importances are recomputed on
the remaining set, and so on until the requested number of landmarks is reached
or the smallest importance exceeds a threshold. Anchors always stay.

**Usage**

>>> from openlandmark.prune import greedy_prune  # doctest: +SKIP
>>> report = greedy_prune(pairs, target_count=11)  # doctest: +SKIP
>>> report.surviving  # doctest: +SKIP
"""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from openlandmark.construct import LossKind, MindConfig, corner_points
from openlandmark.core import validation
from openlandmark.core.misc import atomic_path, subsample
from openlandmark.dataset import Dataset
from openlandmark.encoder import EncoderParams, encode_batch
from openlandmark.register import register_pair

logger = logging.getLogger(__name__)

#: learned points closer than this are considered coincident
COINCIDENT_DISTANCE = 1e-6
#: displacement applied to separate coincident points
COINCIDENT_SHIFT = 1e-3

REPORT_COLUMNS = ["step", "removed_index", "importance", "baseline_loss"]


@dataclass
class EvalPair:
    """An evaluation pair with every learned landmark of both images and the anchors."""

    source_image: np.ndarray
    target_image: np.ndarray
    #: (M, d) learned landmarks of the source, indexed by original landmark index
    source_points: np.ndarray
    target_points: np.ndarray
    anchors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    source_id: str = ""
    target_id: str = ""

    @property
    def n_learned(self) -> int:
        return int(self.source_points.shape[0])


def separate_coincident(points: np.ndarray, n_movable: int) -> np.ndarray:
    """
    Moves learned points that coincide with an earlier point by 1e-3 px.

    Only the first ``n_movable`` rows (the learned points) move, towards the
    centroid of all points.
    """
    points = np.array(points, dtype=np.float64)
    centroid = points.mean(axis=0)
    for j in range(min(n_movable, len(points))):
        for _ in range(len(points)):
            others = np.delete(points, j, axis=0)
            if np.min(np.linalg.norm(others - points[j], axis=1)) >= COINCIDENT_DISTANCE:
                break
            direction = np.sign(centroid - points[j])
            direction[direction == 0] = 1.0
            points[j] = points[j] + COINCIDENT_SHIFT * direction
    return points


def _system_points(pair: EvalPair, indices: List[int]):
    n = len(indices)
    src = separate_coincident(np.vstack([pair.source_points[indices], pair.anchors]), n)
    tgt = separate_coincident(np.vstack([pair.target_points[indices], pair.anchors]), n)
    return src, tgt


def subset_loss(
    pairs: List[EvalPair],
    indices: List[int],
    kind: LossKind = "l2",
    mask: Optional[np.ndarray] = None,
    ncc_patch: int = 5,
    mind: Optional[MindConfig] = None,
) -> float:
    """
    Mean registration loss of the pairs using only the learned landmarks ``indices``
    (plus the anchors).

    Raises
    ------
    SingularSystemError
        if the system of one pair cannot be solved
    """
    values = []
    for pair in pairs:
        src, tgt = _system_points(pair, list(indices))
        values.append(
            register_pair(
                pair.source_image, pair.target_image, src, tgt, kind, mask, ncc_patch, mind
            )
        )
    return float(np.mean(values))


def _check_pairs(pairs: List[EvalPair]) -> int:
    if not pairs:
        raise validation.UserInputError("pruning needs at least one evaluation pair")
    sizes = {p.n_learned for p in pairs}
    if len(sizes) != 1:
        raise validation.UserInputError(f"evaluation pairs disagree on the landmark count {sizes}")
    return sizes.pop()


def importance_scores(
    pairs: List[EvalPair],
    active: Optional[List[int]] = None,
    kind: LossKind = "l2",
    mask: Optional[np.ndarray] = None,
    ncc_patch: int = 5,
    mind: Optional[MindConfig] = None,
    workers: int = 1,
    baseline: Optional[float] = None,
) -> Dict[int, float]:
    """
    Loss increase caused by leaving out each active learned landmark.

    Parameters
    ----------
    pairs : list of EvalPair
        evaluation pairs
    active : list of int, optional
        learned indices currently kept, by default all of them
    kind : {"l2", "ncc", "mind"}
        matching loss, applied to the masked images when ``mask`` is given
    workers : int
        number of threads evaluating the candidates
    baseline : float, optional
        loss with every active landmark, computed when not given

    Returns
    -------
    dict
        original index -> importance, ``inf`` when leaving the landmark out makes a
        system singular
    """
    n_learned = _check_pairs(pairs)
    active = list(range(n_learned)) if active is None else sorted(active)
    d = pairs[0].source_points.shape[1]
    if len(active) - 1 + len(pairs[0].anchors) < d + 2:
        raise validation.UserInputError(
            f"cannot remove a landmark from {len(active)} active landmarks and "
            f"{len(pairs[0].anchors)} anchors without an unsolvable system"
        )
    if baseline is None:
        baseline = subset_loss(pairs, active, kind, mask, ncc_patch, mind)

    def score(i):
        rest = [j for j in active if j != i]
        try:
            return subset_loss(pairs, rest, kind, mask, ncc_patch, mind) - baseline
        except validation.SingularSystemError:
            warnings.warn(f"landmark {i} cannot be removed, the system becomes singular")
            return np.inf

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(score, active))
    else:
        values = [score(i) for i in active]
    return dict(zip(active, values))


@dataclass
class PruneReport:
    """Removal order and per-step losses of a greedy pruning run."""

    original: List[int]
    removed: List[int] = field(default_factory=list)
    importances: List[float] = field(default_factory=list)
    #: loss before any removal followed by the loss after each removal
    baseline_losses: List[float] = field(default_factory=list)

    @property
    def surviving(self) -> List[int]:
        return [i for i in self.original if i not in self.removed]

    def to_dataframe(self) -> pd.DataFrame:
        rows = [
            {"step": 0, "removed_index": -1, "importance": np.nan, "baseline_loss": self.baseline_losses[0]}
        ]
        for step, (i, imp, loss) in enumerate(
            zip(self.removed, self.importances, self.baseline_losses[1:]), 1
        ):
            rows.append({"step": step, "removed_index": i, "importance": imp, "baseline_loss": loss})
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def to_records(self) -> List[Dict]:
        """JSON friendly rows, the baseline row has no importance."""
        return [
            {
                "step": int(row.step),
                "removed_index": int(row.removed_index),
                "importance": None if np.isnan(row.importance) else float(row.importance),
                "baseline_loss": float(row.baseline_loss),
            }
            for row in self.to_dataframe().itertuples(index=False)
        ]

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with atomic_path(path) as tmp:
            self.to_dataframe().to_csv(tmp, index=False, float_format="%.17g")
        return path


def greedy_prune(
    pairs: List[EvalPair],
    target_count: Optional[int] = None,
    max_delta: Optional[float] = None,
    active: Optional[List[int]] = None,
    kind: LossKind = "l2",
    mask: Optional[np.ndarray] = None,
    ncc_patch: int = 5,
    mind: Optional[MindConfig] = None,
    workers: int = 1,
) -> PruneReport:
    """
    Removes the least important landmark until a stop condition holds.

    Parameters
    ----------
    pairs : list of EvalPair
        evaluation pairs
    target_count : int, optional
        number of learned landmarks to keep
    max_delta : float, optional
        stop as soon as the smallest importance exceeds this value
    active : list of int, optional
        learned indices to start from, by default all of them

    Returns
    -------
    PruneReport

    Raises
    ------
    UserInputError
        when no stop condition is given or the target leaves too few control points
    """
    if target_count is None and max_delta is None:
        raise validation.UserInputError("give a target_count, a max_delta or both")
    n_learned = _check_pairs(pairs)
    active = list(range(n_learned)) if active is None else sorted(active)
    d = pairs[0].source_points.shape[1]
    n_anchors = len(pairs[0].anchors)
    if target_count is not None:
        if target_count > len(active):
            raise validation.UserInputError(
                f"target_count {target_count} exceeds the {len(active)} active landmarks"
            )
        if target_count < 1 or target_count + n_anchors < d + 3:
            raise validation.UserInputError(
                f"target_count {target_count} leaves fewer than {d + 3} control points"
            )

    settings = dict(kind=kind, mask=mask, ncc_patch=ncc_patch, mind=mind)
    report = PruneReport(original=list(active))
    baseline = subset_loss(pairs, active, **settings)
    report.baseline_losses.append(baseline)
    logger.info("pruning from %d landmarks, baseline loss %.6g", len(active), baseline)

    while target_count is None or len(active) > target_count:
        if len(active) - 1 + n_anchors < d + 3:
            break
        scores = importance_scores(pairs, active, workers=workers, baseline=baseline, **settings)
        # ties resolve to the lowest index
        index = min(active, key=lambda i: (scores[i], i))
        importance = scores[index]
        if not np.isfinite(importance):
            warnings.warn("no landmark can be removed without a singular system")
            break
        if max_delta is not None and importance > max_delta:
            break
        active = [i for i in active if i != index]
        baseline = subset_loss(pairs, active, **settings)
        report.removed.append(index)
        report.importances.append(float(importance))
        report.baseline_losses.append(baseline)
        logger.info("removed landmark %d (importance %.6g), %d left", index, importance, len(active))
    return report


def eval_pairs_from_dataset(
    params: EncoderParams,
    dataset: Dataset,
    ids: Optional[List[str]] = None,
    anchors: int = 4,
    cap: int = 200,
    seed: int = 0,
) -> List[EvalPair]:
    """
    Evaluation pairs of the given ids (the train split by default), capped at ``cap``
    random ordered pairs. Each image is encoded once.
    """
    ids = dataset.ids("train") if ids is None else ids
    if len(ids) < 2:
        raise validation.UserInputError("pruning needs at least 2 images")
    ordered = [(a, b) for a in ids for b in ids if a != b]
    ordered = subsample(ordered, cap, seed)
    used = sorted({i for pair in ordered for i in pair})
    learned = dict(zip(used, encode_batch(params, dataset.stack(used))))
    anchor_points = (
        corner_points(tuple(dataset.image_shape)[::-1]) if anchors else np.zeros((0, 2))
    )
    return [
        EvalPair(
            source_image=dataset.images[a],
            target_image=dataset.images[b],
            source_points=learned[a],
            target_points=learned[b],
            anchors=anchor_points,
            source_id=a,
            target_id=b,
        )
        for a, b in ordered
    ]
