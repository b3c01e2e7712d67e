"""
`Shapestats` module
===================

Statistics of landmark descriptors over a population of images.

A descriptor is the landmark-major flattening ``(x1, y1, x2, y2, ...)`` of a
landmark set. A control population gives a mean and a covariance, from which
the Mahalanobis Z-score of any query descriptor follows. When there are fewer
samples than descriptor dimensions the statistics are fitted in a principal
component basis of the controls.

**Usage**

>>> import numpy as np
>>> from openlandmark.shapestats import fit_control_stats, zscore
>>> rng = np.random.default_rng(0)
>>> stats = fit_control_stats(rng.normal(size=(50, 4)))
>>> round(zscore(stats, stats.raw_mean), 12)
0.0
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy.linalg as la
from scipy.stats import mannwhitneyu

from openlandmark.construct import LandmarkSet
from openlandmark.core import validation
from openlandmark.core.kernel import build_system, coordinate_scale, solve_system, warp_image
from openlandmark.core.misc import atomic_path

logger = logging.getLogger(__name__)

#: eigenvalues below this fraction of the largest one count as zero
RELATIVE_EIGEN_CUTOFF = 1e-12
#: smallest eigenvalue accepted for the working covariance
MIN_EIGENVALUE = 1e-10


def _descriptor_matrix(descriptors) -> np.ndarray:
    rows = [d.flatten() if isinstance(d, LandmarkSet) else np.ravel(d) for d in descriptors]
    if not rows:
        raise validation.UserInputError("no descriptors given")
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise validation.UserInputError(f"descriptors have different lengths {sorted(lengths)}")
    data = np.asarray(rows, dtype=np.float64)
    validation.must_be_finite(data, "descriptors")
    return data


@dataclass
class ControlStats:
    """
    Mean and covariance of a control population in its working basis.

    With a PCA ``basis`` (D x k, orthonormal columns) descriptors are centred on
    ``raw_mean`` and projected before use; ``mean`` is then the zero vector.
    """

    mean: np.ndarray
    covariance: np.ndarray
    raw_mean: np.ndarray
    n_samples: int
    basis: Optional[np.ndarray] = None

    @property
    def raw_dim(self) -> int:
        return int(self.raw_mean.size)

    @property
    def working_dim(self) -> int:
        return int(self.mean.size)

    def project(self, descriptor) -> np.ndarray:
        """Descriptor expressed in the working basis."""
        z = np.ravel(descriptor.flatten() if isinstance(descriptor, LandmarkSet) else descriptor)
        z = np.asarray(z, dtype=np.float64)
        if z.size != self.raw_dim:
            raise validation.UserInputError(
                f"descriptor has length {z.size}, the statistics expect {self.raw_dim}"
            )
        if self.basis is None:
            return z
        return self.basis.T @ (z - self.raw_mean)


def fit_control_stats(descriptors: Sequence, pca_dims: Optional[int] = None) -> ControlStats:
    """
    Fits the control population statistics.

    Parameters
    ----------
    descriptors : sequence of LandmarkSet or 1D arrays
        control descriptors, at least 2, all of the same length D
    pca_dims : int, optional
        number of principal components to keep. PCA is also used whenever the
        number of samples n does not exceed D or the raw covariance is singular;
        at most n - 1 components with a relative eigenvalue above 1e-12 and an
        eigenvalue above 1e-10 are kept.

    Returns
    -------
    ControlStats

    Raises
    ------
    ZeroVarianceError
        if the working covariance is not positive definite
    """
    data = _descriptor_matrix(descriptors)
    n, dim = data.shape
    if n < 2:
        raise validation.UserInputError("at least 2 control descriptors are needed")
    raw_mean = data.mean(axis=0)
    centred = data - raw_mean

    use_pca = pca_dims is not None or n <= dim
    if not use_pca:
        basis = None
        mean = raw_mean
        covariance = np.atleast_2d(np.cov(data, rowvar=False))
        if np.linalg.eigvalsh(covariance)[0] <= MIN_EIGENVALUE:
            # flat descriptor directions: keep the principal components that vary
            logger.info("control covariance is singular, falling back to principal components")
            use_pca = True
    if use_pca:
        _, s, vt = np.linalg.svd(centred, full_matrices=False)
        eig = s**2 / (n - 1)
        if eig.size == 0 or eig[0] <= MIN_EIGENVALUE:
            raise validation.ZeroVarianceError("the control descriptors have no variance")
        k = int(np.sum((eig / eig[0] > RELATIVE_EIGEN_CUTOFF) & (eig > MIN_EIGENVALUE)))
        k = min(k, n - 1) if pca_dims is None else min(k, n - 1, pca_dims)
        basis = vt[:k].T
        projected = centred @ basis
        mean = np.zeros(k)
        covariance = projected.T @ projected / (n - 1)
        logger.info("control statistics fitted in %d principal components", k)

    covariance = np.atleast_2d(covariance)
    smallest = np.linalg.eigvalsh(covariance)[0] if covariance.size else 0.0
    if smallest <= MIN_EIGENVALUE:
        raise validation.ZeroVarianceError(
            f"control covariance is not positive definite (smallest eigenvalue {smallest:.3e})"
        )
    return ControlStats(
        mean=mean, covariance=covariance, raw_mean=raw_mean, n_samples=n, basis=basis
    )


def zscore(stats: ControlStats, descriptor) -> float:
    """Mahalanobis distance ``sqrt((z - mu)^T Sigma^-1 (z - mu))`` of a descriptor."""
    diff = stats.project(descriptor) - stats.mean
    factor = la.cho_factor(stats.covariance)
    return float(np.sqrt(max(diff @ la.cho_solve(factor, diff), 0.0)))


def zscores(stats: ControlStats, descriptors: Sequence) -> np.ndarray:
    return np.array([zscore(stats, d) for d in descriptors])


def anomaly_auc(positive_scores, negative_scores) -> float:
    """Probability that a positive sample scores above a negative one (ties count 1/2)."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise validation.UserInputError("AUC needs at least one score of each kind")
    u = mannwhitneyu(pos, neg, alternative="two-sided").statistic
    return float(u / (pos.size * neg.size))


def mean_landmarks(landmark_sets: Sequence) -> np.ndarray:
    """Pointwise mean of aligned landmark sets, shape (M, d)."""
    pts = np.stack(
        [s.points if isinstance(s, LandmarkSet) else np.asarray(s, dtype=np.float64) for s in landmark_sets]
    )
    return pts.mean(axis=0)


def mean_shape_image(
    masks: Sequence[np.ndarray],
    landmark_sets: Sequence,
    mean: Optional[np.ndarray] = None,
    ids: Optional[List[str]] = None,
) -> np.ndarray:
    """
    Average of the segmentation masks warped onto the mean landmarks.

    Each mask is warped with the system built from (source = its landmarks,
    target = mean landmarks), then all warped masks are averaged pixelwise.

    Parameters
    ----------
    masks : sequence of 2D arrays
        segmentation masks in [0, 1]
    landmark_sets : sequence of LandmarkSet or (M, d) arrays
        landmarks of each mask, aligned with ``masks``
    mean : (M, d) array, optional
        mean landmarks, by default the pointwise mean of ``landmark_sets``
    ids : list of str, optional
        sample names used in error messages

    Raises
    ------
    SingularSystemError
        naming the sample whose system cannot be solved
    """
    if len(masks) != len(landmark_sets) or not masks:
        raise validation.UserInputError("masks and landmark sets must be non-empty and aligned")
    ids = ids or [str(i) for i in range(len(masks))]
    mean = mean_landmarks(landmark_sets) if mean is None else np.asarray(mean, dtype=np.float64)
    total = np.zeros_like(np.asarray(masks[0], dtype=np.float64))
    scale = coordinate_scale(total.shape)
    for name, mask, lms in zip(ids, masks, landmark_sets):
        try:
            params = solve_system(build_system(lms, mean, scale=scale))
        except validation.SingularSystemError as err:
            raise validation.SingularSystemError(
                f"sample {name}: {err}", condition=err.condition
            ) from err
        total += warp_image(mask, params)
    return np.clip(total / len(masks), 0.0, 1.0)


def feature_columns(n_values: int, dim: int = 2) -> List[str]:
    axes = "xyz"[:dim]
    return [f"{axes[c]}{i}" for i in range(n_values // dim) for c in range(dim)]


def export_features(
    path: Union[str, Path], landmark_sets: Sequence, ids: List[str], dim: int = 2
) -> Path:
    """
    Writes one row per id with the flattened landmarks (columns ``id, x0, y0, x1, ...``).

    Values are written with 17 significant digits so they read back bit-exactly.
    """
    if len(landmark_sets) != len(ids):
        raise validation.UserInputError("one id is needed per landmark set")
    rows = [s.flatten() if isinstance(s, LandmarkSet) else np.ravel(s) for s in landmark_sets]
    n_values = len(rows[0]) if rows else 0
    df = pd.DataFrame(rows, columns=feature_columns(n_values, dim) if rows else [])
    df.insert(0, "id", list(ids))
    path = Path(path)
    with atomic_path(path) as tmp:
        df.to_csv(tmp, index=False, float_format="%.17g")
    return path


def read_features(path: Union[str, Path]) -> pd.DataFrame:
    """Reads a feature file written by :py:func:`export_features`, indexed by id."""
    df = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    return df.set_index("id")
