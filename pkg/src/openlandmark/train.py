"""
`Train` module
==============

Training of the landmark encoder on image pairs.

For every pair of a batch the source and target images are encoded with the
same parameters, the corner anchors are appended, the TPS system is solved,
the source is warped onto the target and the configured loss is
differentiated. The mean gradient of the batch drives an Adam step. After
each epoch the pure matching loss on validation pairs decides early stopping
and which parameters are returned.

**Usage**

>>> from openlandmark.construct import TrainConfig
>>> from openlandmark.train import make_pairs
>>> [(p.source, p.target) for p in make_pairs(["a", "b", "c"])][:2]
[('a', 'b'), ('a', 'c')]
"""

import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from openlandmark.construct import PairRecord, TrainConfig, corner_points
from openlandmark.core import validation
from openlandmark.core.misc import min_pairwise_distance, subsample
from openlandmark.core.tape import Tape, backward
from openlandmark.dataset import Dataset
from openlandmark.encoder import EncoderParams, encode_batch, init_params, param_leaves
from openlandmark import losses, register

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_match_loss", "mean_kappa", "wall_seconds"]


def make_pairs(
    ids: List[str],
    strategy: str = "all_pairs",
    seed: int = 0,
    k: Optional[int] = None,
    segmented: Optional[set] = None,
) -> List[PairRecord]:
    """
    Ordered training pairs (self-pairs excluded).

    Parameters
    ----------
    ids : list of str
        image ids, at least 2
    strategy : {"all_pairs", "random_k"}
        every ordered pair, or ``k`` of them drawn without replacement
    seed : int
        seed of the random_k draw
    k : int, optional
        number of pairs of the random_k strategy
    segmented : set, optional
        ids that have a segmentation, used to fill the pair segmentation ids

    Returns
    -------
    list of PairRecord
    """
    validation.str_must_be_one_of_those(strategy, "pair strategy", ["all_pairs", "random_k"])
    if len(ids) < 2:
        raise validation.UserInputError(f"at least 2 images are needed to build pairs, got {len(ids)}")
    segmented = segmented or set()
    ordered = [(a, b) for a in ids for b in ids if a != b]
    if strategy == "random_k":
        if k is None or k < 1:
            raise validation.UserInputError("random_k needs a positive number of pairs k")
        if k > len(ordered):
            raise validation.UserInputError(
                f"cannot draw {k} pairs from {len(ordered)} available ordered pairs"
            )
        draw = np.random.default_rng(seed).choice(len(ordered), size=k, replace=False)
        ordered = [ordered[i] for i in draw]
    return [
        PairRecord(
            source=a,
            target=b,
            source_seg=a if a in segmented else None,
            target_seg=b if b in segmented else None,
        )
        for a, b in ordered
    ]


class Adam:
    """Adam optimizer acting on the weights of an :py:class:`EncoderParams`."""

    def __init__(self, params: EncoderParams, lr: float, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.weights.items()}

    def step(self, params: EncoderParams, grads: Dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in params.names:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            params.weights[name] = params.weights[name] - self.lr * update


@dataclass
class TrainResult:
    """
    Outcome of :py:func:`train`.

    ``params`` are the parameters of the epoch with the lowest validation matching loss.
    The history starts with an epoch 0 row holding the losses of the initial parameters,
    before any update. ``final_params`` are the parameters after the last epoch run.
    """

    params: EncoderParams
    history: pd.DataFrame
    best_epoch: int
    config: TrainConfig
    stopped_early: bool = False
    final_params: Optional[EncoderParams] = None

    @property
    def best_val_match_loss(self) -> float:
        return float(self.history.loc[self.history["epoch"] == self.best_epoch, "val_match_loss"].iloc[0])

    @property
    def best_mean_kappa(self) -> float:
        return float(self.history.loc[self.history["epoch"] == self.best_epoch, "mean_kappa"].iloc[0])

    def details(self) -> Dict:
        return {
            "epochs run": int((self.history["epoch"] > 0).sum()),
            "best epoch": self.best_epoch,
            "best validation match loss": self.best_val_match_loss,
            "mean kappa at best epoch": self.best_mean_kappa,
            "stopped early": self.stopped_early,
        }

    def plot(self, assign: bool = False):
        from openlandmark.utils.graphics import plot_history

        fig = plot_history(self.history)
        return fig if assign else None


@dataclass
class _Context:
    dataset: Dataset
    config: TrainConfig
    anchors: np.ndarray
    mask: Optional[np.ndarray]


def _anchors(config: TrainConfig, shape: Tuple[int, int]) -> np.ndarray:
    if config.anchors == 0:
        return np.zeros((0, 2))
    return corner_points(tuple(shape)[::-1])


def variant_mask(
    config: TrainConfig, shape, mask: Optional[np.ndarray] = None
) -> Optional[np.ndarray]:
    """Mask of the localized variant (``mask`` or the blurred ``mask_box``), None otherwise."""
    if config.variant != "localized":
        return None
    if mask is not None:
        return np.asarray(mask, dtype=np.float64)
    return losses.box_mask(shape, config.mask_box, config.mask_sigma).data


def _pair_step(params: EncoderParams, pair: PairRecord, ctx: _Context, with_grad: bool = True):
    ds = ctx.dataset
    tape = Tape()
    leaves = param_leaves(tape, params)
    terms = register.pair_objective(
        tape,
        leaves,
        params.architecture,
        ds.images[pair.source],
        ds.images[pair.target],
        ctx.anchors,
        ctx.config,
        mask=ctx.mask,
        source_seg=ds.segmentations.get(pair.source_seg) if pair.has_segmentations else None,
        target_seg=ds.segmentations.get(pair.target_seg) if pair.has_segmentations else None,
    )
    grads = backward(tape, output=terms.loss) if with_grad else None
    return float(terms.loss.value), float(terms.kappa.value), grads


def _abort(where: str, pair: PairRecord, err: Exception):
    message = f"training aborted at {where}, pair {pair.source} -> {pair.target}: {err}"
    logger.warning(message)
    raise validation.TrainingAbortedError(message) from err


def _run_batch(
    params, batch: List[PairRecord], ctx: _Context, pool, where: str, with_grad: bool = True
):
    if pool is None:
        futures = None
    else:
        futures = [pool.submit(_pair_step, params, pair, ctx, with_grad) for pair in batch]
    results = []
    for i, pair in enumerate(batch):
        try:
            if futures is None:
                out = _pair_step(params, pair, ctx, with_grad)
            else:
                out = futures[i].result()
        except (validation.SingularSystemError, validation.NonFiniteError) as err:
            _abort(where, pair, err)
        if not np.isfinite(out[0]):
            _abort(where, pair, validation.NonFiniteError("the loss is not finite"))
        results.append(out)
    return results


def validation_match(
    params: EncoderParams,
    dataset: Dataset,
    pairs: List[PairRecord],
    config: TrainConfig,
    mask: Optional[np.ndarray] = None,
) -> float:
    """Mean pure matching loss (no regulariser) of registered validation pairs."""
    shape = dataset.image_shape
    anchors = _anchors(config, shape)
    mask = variant_mask(config, shape, mask)
    ids = sorted({p.source for p in pairs} | {p.target for p in pairs})
    learned = dict(zip(ids, encode_batch(params, dataset.stack(ids))))
    values = []
    for pair in pairs:
        try:
            values.append(
                register.register_pair(
                    dataset.images[pair.source],
                    dataset.images[pair.target],
                    np.vstack([learned[pair.source], anchors]),
                    np.vstack([learned[pair.target], anchors]),
                    config.loss_kind,
                    mask=mask,
                    ncc_patch=config.ncc_patch,
                    mind=config.mind,
                )
            )
        except validation.SingularSystemError as err:
            _abort("validation", pair, err)
    return float(np.mean(values))


def unregistered_match(
    dataset: Dataset,
    pairs: List[PairRecord],
    config: TrainConfig,
    mask: Optional[np.ndarray] = None,
) -> float:
    """Mean matching loss of the pairs without registration (identity warp)."""
    mask = variant_mask(config, dataset.image_shape, mask)
    values = []
    for pair in pairs:
        src, tgt = dataset.images[pair.source], dataset.images[pair.target]
        if mask is not None:
            values.append(
                losses.masked_match(tgt, src, mask, mask, config.loss_kind, config.ncc_patch, config.mind)
            )
        else:
            values.append(losses.match_loss(config.loss_kind, tgt, src, config.ncc_patch, config.mind))
    return float(np.mean(values))


def validation_pairs(dataset: Dataset, config: TrainConfig, ids: Optional[List[str]] = None):
    ids = dataset.ids("val") if ids is None else ids
    return subsample(make_pairs(ids), config.val_max_pairs, config.seed + 1)


def train(
    config: TrainConfig,
    dataset: Dataset,
    init: EncoderParams,
    mask: Optional[np.ndarray] = None,
    train_ids: Optional[List[str]] = None,
    val_ids: Optional[List[str]] = None,
) -> TrainResult:
    """
    Trains the encoder with Adam and early stopping on the validation matching loss.

    Parameters
    ----------
    config : TrainConfig
        hyper-parameters
    dataset : Dataset
        images, splits and segmentations
    init : EncoderParams
        initial parameters, left untouched
    mask : numpy array, optional
        mask of the localized variant, by default built from ``config.mask_box``
    train_ids, val_ids : list of str, optional
        override the ``train`` and ``val`` splits of the dataset

    Returns
    -------
    TrainResult

    Raises
    ------
    TrainingAbortedError
        when a TPS system cannot be solved, naming the epoch, batch and pair
    """
    if config.lam == 0:
        warnings.warn(
            "training with lambda = 0 leaves the TPS systems unregularised and may "
            "fail on singular systems",
            UserWarning,
        )
    shape = dataset.image_shape
    arch = init.architecture
    if tuple(arch.input_shape) != tuple(shape):
        raise validation.UserInputError(
            f"encoder input shape {tuple(arch.input_shape)} differs from the images {shape}"
        )
    train_ids = dataset.ids("train") if train_ids is None else train_ids
    segmented = set(dataset.segmentations) if config.variant == "weak" else set()
    pairs = make_pairs(train_ids, config.pair_strategy, config.seed, config.pair_count, segmented)
    pairs = subsample(pairs, config.max_pairs, config.seed)
    val_pairs = validation_pairs(dataset, config, val_ids)
    ctx = _Context(dataset, config, _anchors(config, shape), variant_mask(config, shape, mask))

    params = init.copy()
    adam = Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    best_params, best_epoch = params.copy(), 0
    since_best, stopped_early, rows = 0, False, []
    start = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    logger.info(
        "training on %d pairs (%d validation pairs), %d parameters",
        len(pairs),
        len(val_pairs),
        params.n_parameters,
    )

    def record(epoch, losses, kappas):
        val = validation_match(params, dataset, val_pairs, config, ctx.mask)
        rows.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_match_loss": val,
                "mean_kappa": float(np.mean(kappas)),
                "wall_seconds": time.perf_counter() - start,
            }
        )
        logger.info(
            "epoch %d: train loss %.6g, validation match loss %.6g, mean kappa %.6g",
            epoch,
            rows[-1]["train_loss"],
            val,
            rows[-1]["mean_kappa"],
        )
        return val

    try:
        # epoch 0: the initial parameters, forward passes only
        results = []
        for b, first in enumerate(range(0, len(pairs), config.batch_pairs), 1):
            batch = pairs[first : first + config.batch_pairs]
            results.extend(_run_batch(params, batch, ctx, pool, f"epoch 0, batch {b}", False))
        best_val = record(0, [r[0] for r in results], [r[1] for r in results])

        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(pairs))
            epoch_losses, epoch_kappas = [], []
            for b, first in enumerate(range(0, len(pairs), config.batch_pairs), 1):
                batch = [pairs[i] for i in order[first : first + config.batch_pairs]]
                results = _run_batch(params, batch, ctx, pool, f"epoch {epoch}, batch {b}")
                grads = {}
                for name in params.names:
                    total = results[0][2][name]
                    for r in results[1:]:
                        total = total + r[2][name]
                    grads[name] = total / len(results)
                adam.step(params, grads)
                epoch_losses.extend(r[0] for r in results)
                epoch_kappas.extend(r[1] for r in results)

            val = record(epoch, epoch_losses, epoch_kappas)
            if val < best_val:
                best_val, best_params, best_epoch, since_best = val, params.copy(), epoch, 0
            else:
                since_best += 1
                if since_best >= config.early_stop_patience:
                    stopped_early = True
                    logger.info("early stopping after epoch %d (best epoch %d)", epoch, best_epoch)
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    return TrainResult(
        params=best_params,
        history=pd.DataFrame(rows, columns=HISTORY_COLUMNS),
        best_epoch=best_epoch,
        config=config,
        stopped_early=stopped_early,
        final_params=params.copy(),
    )


def lambda_sweep(
    config: TrainConfig,
    dataset: Dataset,
    lambdas: List[float],
    folds: int = 3,
    init: Optional[EncoderParams] = None,
) -> pd.DataFrame:
    """
    Cross-validation of the regulariser weight.

    The non-test ids are split in ``folds`` folds by a seeded permutation; each
    fold serves once as validation set while the others train. A failed run is
    recorded in the ``error`` column instead of stopping the sweep.

    Returns
    -------
    pandas.DataFrame
        columns ``lambda, fold, val_match_loss, mean_kappa, error`` sorted by lambda then fold
    """
    if folds < 2:
        raise validation.UserInputError("a lambda sweep needs at least 2 folds")
    if not lambdas:
        raise validation.UserInputError("a lambda sweep needs at least one lambda")
    ids = [i for i in dataset.ids() if dataset.splits[i] != "test"]
    if len(ids) < 2 * folds:
        raise validation.UserInputError(
            f"{len(ids)} non-test images cannot fill {folds} folds of at least 2 images"
        )
    perm = np.random.default_rng(config.seed).permutation(len(ids))
    fold_ids = [[ids[i] for i in sorted(part)] for part in np.array_split(perm, folds)]
    if init is None:
        init = init_params(config.seed, config.architecture(dataset.image_shape))

    rows = []
    for lam in sorted(lambdas):
        for f in range(folds):
            val_ids = fold_ids[f]
            train_ids = [i for g in range(folds) if g != f for i in fold_ids[g]]
            row = {"lambda": lam, "fold": f, "val_match_loss": np.nan, "mean_kappa": np.nan, "error": ""}
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", UserWarning)
                    result = train(
                        config.replace(lam=lam), dataset, init, train_ids=train_ids, val_ids=val_ids
                    )
                row["val_match_loss"] = result.best_val_match_loss
                row["mean_kappa"] = result.best_mean_kappa
            except validation.TrainingAbortedError as err:
                row["error"] = str(err)
            logger.info("lambda %g fold %d: %s", lam, f, row["error"] or row["val_match_loss"])
            rows.append(row)
    return pd.DataFrame(rows).sort_values(["lambda", "fold"], kind="stable").reset_index(drop=True)


def landmark_spread(params: EncoderParams, images: np.ndarray) -> float:
    """Mean over images of the smallest distance between two learned landmarks."""
    learned = encode_batch(params, images)
    return float(np.mean([min_pairwise_distance(p) for p in learned]))
