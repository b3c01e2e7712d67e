"""
`cli` module
============

Command line entry point ``openlandmark``.

Every verb writes into the directory given by ``--out``, which is locked for
the duration of the run. Files are written under a temporary name and renamed
once complete. Any error ends the run with a single line on stderr and exit
status 1.

.. code-block:: text

    openlandmark synth --out data --n-per-class 50 --seed 0
    openlandmark train --manifest data/manifest.csv --config train.cfg --out run
    openlandmark infer --checkpoint run/checkpoint.npz --manifest data/manifest.csv --out run
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from openlandmark import losses, shapestats
from openlandmark.construct import TrainConfig
from openlandmark.core import validation
from openlandmark.core.misc import atomic_path, atomic_paths, output_lock
from openlandmark.core.txt import txt_checkpoint, txt_table
from openlandmark.dataset import Dataset
from openlandmark.encoder import Checkpoint, init_params, load_checkpoint, save_checkpoint
from openlandmark.globals import VERSION
from openlandmark.prune import eval_pairs_from_dataset, greedy_prune
from openlandmark.register import register_landmarks
from openlandmark.train import lambda_sweep, train, variant_mask
from openlandmark.utils import graphics, imageio, synth

logger = logging.getLogger(__name__)

PROG = "openlandmark"


def _write_json(path: Path, data) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _write_csv(path: Path, df, **kwargs) -> Path:
    with atomic_path(path) as tmp:
        df.to_csv(tmp, index=False, **kwargs)
    return path


def _save_figure(fig, path: Path) -> Path:
    with atomic_path(path) as tmp:
        graphics.save_figure(fig, tmp)
    return path


def _config(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _dataset(args) -> Dataset:
    if not args.manifest:
        raise validation.UserInputError("--manifest is required")
    return Dataset.read(args.manifest)


def _training_config(ckpt: Checkpoint) -> TrainConfig:
    stored = ckpt.metadata.get("config")
    if not stored:
        logger.warning("the checkpoint holds no training config, using the defaults")
        return TrainConfig()
    try:
        return TrainConfig(**stored)
    except (TypeError, ValueError) as err:
        raise validation.UserInputError(
            f"cannot read the checkpoint training config: {err}"
        ) from err


def _checkpoint_for(args, dataset: Dataset) -> Checkpoint:
    ckpt = load_checkpoint(args.checkpoint)
    if tuple(dataset.image_shape) != ckpt.image_shape:
        raise validation.UserInputError(
            f"images have shape {tuple(dataset.image_shape)}, "
            f"the checkpoint expects {ckpt.image_shape}"
        )
    return ckpt


def _mean_landmarks(config: TrainConfig) -> Optional[np.ndarray]:
    if config.init_landmarks is None:
        return None
    features = shapestats.read_features(config.init_landmarks)
    n_values = 2 * config.n_landmarks
    if features.shape[1] < n_values:
        raise validation.UserInputError(
            f"{config.init_landmarks} has {features.shape[1]} values per row, "
            f"{n_values} are needed for {config.n_landmarks} landmarks"
        )
    # learned landmarks come first, anchors after
    return features.iloc[:, :n_values].to_numpy().mean(axis=0).reshape(-1, 2)


# ----------------------------------------------------------------
#                           COMMANDS
# ----------------------------------------------------------------


def cmd_synth(args):
    seed = 0 if args.seed is None else args.seed
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if len(classes) < 2:
        raise validation.UserInputError("at least 2 shape families are needed")
    with output_lock(args.out):
        path = synth.generate(args.out, args.n_per_class, seed, classes, args.size)
    print(f"manifest written to {path}")


def cmd_train(args):
    dataset = _dataset(args)
    dataset.require_trainable()
    config = _config(args)
    arch = config.architecture(dataset.image_shape)
    init = init_params(config.seed, arch, _mean_landmarks(config))
    out = Path(args.out)
    with output_lock(out):
        result = train(config, dataset, init)
        metadata = {"config": config.to_dict(), **result.details()}
        ckpt = Checkpoint(params=result.params, anchors=config.anchors, metadata=metadata)
        targets = [out / "checkpoint.npz", out / "history.csv", out / "history.png"]
        with atomic_paths(*targets) as (ckpt_path, history_path, figure_path):
            save_checkpoint(ckpt_path, ckpt)
            _write_csv(history_path, result.history, float_format="%.17g")
            _save_figure(result.plot(assign=True), figure_path)
    print(txt_checkpoint(ckpt))
    print(txt_table("Training history", result.history))


def cmd_infer(args):
    dataset = _dataset(args)
    ckpt = _checkpoint_for(args, dataset)
    ids = dataset.ids(args.split)
    if not ids:
        raise validation.UserInputError(f"no images in split '{args.split}'")
    sets = ckpt.landmark_sets(dataset.stack(ids))
    out = Path(args.out)
    with output_lock(out):
        path = shapestats.export_features(out / "landmarks.csv", sets, ids)
    print(f"landmarks of {len(ids)} images written to {path}")


def cmd_register(args):
    dataset = _dataset(args)
    ckpt = _checkpoint_for(args, dataset)
    for name in (args.source, args.target):
        if name not in dataset.images:
            raise validation.UserInputError(f"id {name} is not in the manifest")
    source, target = dataset.images[args.source], dataset.images[args.target]
    points = ckpt.landmarks(np.stack([source, target]))
    reg = register_landmarks(source, points[0], points[1])
    residual = np.abs(target - reg.registered)
    stats = {
        "source": args.source,
        "target": args.target,
        "loss_kind": args.loss,
        "match_loss_before": losses.match_loss(args.loss, target, source),
        "match_loss_after": losses.match_loss(args.loss, target, reg.registered),
        "max_abs_residual": float(residual.max()),
        "mean_abs_residual": float(residual.mean()),
        "kappa": reg.kappa,
        "system_residual": reg.residual,
    }
    out = Path(args.out)
    with output_lock(out):
        imageio.write_png(out / "registered.png", reg.registered)
        imageio.write_png(out / "residual.png", residual)
        fig = graphics.plot_landmarks(
            [source, target, reg.registered],
            [points[0], points[1], points[1]],
            titles=[f"source {args.source}", f"target {args.target}", "registered"],
            anchor_count=ckpt.anchors,
        )
        _save_figure(fig, out / "overlay.png")
        _write_json(out / "stats.json", stats)
    print(json.dumps(stats, indent=2, sort_keys=True))


def cmd_prune(args):
    if args.target_count is None and args.max_delta is None:
        raise validation.UserInputError("give --target-count, --max-delta or both")
    dataset = _dataset(args)
    ckpt = _checkpoint_for(args, dataset)
    config = _training_config(ckpt)
    kind = args.loss or config.loss_kind
    seed = 0 if args.seed is None else args.seed
    pairs = eval_pairs_from_dataset(
        ckpt.params, dataset, dataset.ids("train"), ckpt.anchors, args.cap, seed
    )
    report = greedy_prune(
        pairs,
        target_count=args.target_count,
        max_delta=args.max_delta,
        active=ckpt.active,
        kind=kind,
        mask=variant_mask(config, dataset.image_shape),
        ncc_patch=config.ncc_patch,
        mind=config.mind,
        workers=args.workers,
    )
    pruned = Checkpoint(
        params=ckpt.params,
        anchors=ckpt.anchors,
        active_indices=report.surviving,
        metadata=ckpt.metadata,
        prune_report=report.to_records(),
    )
    out = Path(args.out)
    with output_lock(out):
        targets = [out / "checkpoint.npz", out / "prune_report.csv"]
        with atomic_paths(*targets) as (ckpt_path, report_path):
            save_checkpoint(ckpt_path, pruned)
            report.to_csv(report_path)
    print(f"pruned with the {kind} loss")
    print(txt_table("Pruning", report.to_dataframe()))


def cmd_zscore(args):
    dataset = _dataset(args)
    ckpt = _checkpoint_for(args, dataset)
    controls = dataset.ids(args.control, args.control_label)
    if len(controls) < 2:
        raise validation.UserInputError(
            f"split '{args.control}' holds {len(controls)} control images, at least 2 are needed"
        )
    queries = dataset.ids(args.query)
    if not queries:
        raise validation.UserInputError(f"no images in query split '{args.query}'")
    if args.mean_shape:
        missing = [i for i in controls if i not in dataset.segmentations]
        if missing:
            raise validation.UserInputError(
                f"--mean-shape needs a segmentation for every control, {missing[0]} has none"
            )
    n_learned = len(ckpt.active)
    control_full = ckpt.landmarks(dataset.stack(controls))
    control_lms = control_full[:, :n_learned]
    query_lms = ckpt.landmarks(dataset.stack(queries))[:, :n_learned]
    stats = shapestats.fit_control_stats(list(control_lms), args.pca_dims)
    scores = shapestats.zscores(stats, list(query_lms))
    mean_shape = None
    if args.mean_shape:
        mean_shape = shapestats.mean_shape_image(
            [dataset.segmentations[i] for i in controls], list(control_full), ids=controls
        )

    df = pd.DataFrame(
        {
            "id": queries,
            "split": [dataset.splits[i] for i in queries],
            "label": [dataset.labels.get(i, "") for i in queries],
            "zscore": scores,
        }
    )
    out = Path(args.out)
    targets = [out / "scores.csv"]
    if mean_shape is not None:
        targets += [out / "mean_shape.png", out / "mean_shape.raw"]
    with output_lock(out), atomic_paths(*targets) as paths:
        _write_csv(paths[0], df, float_format="%.17g")
        if mean_shape is not None:
            imageio.write_png(paths[1], mean_shape)
            imageio.write_raw_image(paths[2], mean_shape)
    print(txt_table("Z-scores", df))
    if mean_shape is not None:
        print(f"mean shape of {len(controls)} controls written to {targets[1]}")
    if args.control_label is not None:
        is_control = df["label"] == args.control_label
        if is_control.any() and (~is_control).any():
            auc = shapestats.anomaly_auc(df.loc[~is_control, "zscore"], df.loc[is_control, "zscore"])
            print(f"anomaly AUC ({args.control_label} vs others): {auc:.4f}")


def cmd_sweep(args):
    dataset = _dataset(args)
    config = _config(args)
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError as err:
        raise validation.UserInputError(f"cannot read the lambda list '{args.lambdas}'") from err
    out = Path(args.out)
    with output_lock(out):
        init = init_params(config.seed, config.architecture(dataset.image_shape), _mean_landmarks(config))
        sweep = lambda_sweep(config, dataset, lambdas, args.folds, init)
        _write_csv(out / "sweep.csv", sweep, float_format="%.17g")
        _save_figure(graphics.plot_sweep(sweep), out / "sweep.png")
    print(txt_table("Lambda sweep", sweep.drop(columns="error")))


# ----------------------------------------------------------------
#                            PARSER
# ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="key = value training config file")
    common.add_argument("--manifest", default=None, help="dataset manifest (CSV)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    loss = argparse.ArgumentParser(add_help=False)
    loss.add_argument("--loss", choices=["l2", "ncc", "mind"], default="l2", help="matching loss")

    parser = argparse.ArgumentParser(
        prog=PROG, description="Landmark discovery and thin-plate spline registration."
    )
    parser.add_argument("--version", action="version", version=f"{PROG} {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic shape dataset")
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--classes", default=",".join(synth.FAMILIES))
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the landmark encoder")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="landmarks of every image of a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("register", parents=[common, loss], help="register two images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="id of the source image")
    p.add_argument("--target", required=True, help="id of the target image")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("prune", parents=[common, loss], help="remove redundant landmarks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target-count", type=int, default=None)
    p.add_argument("--max-delta", type=float, default=None)
    p.add_argument("--cap", type=int, default=200, help="number of evaluation pairs")
    p.add_argument("--workers", type=int, default=1)
    # the loss of the checkpoint training config unless --loss is given
    p.set_defaults(loss=None)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("zscore", parents=[common], help="Mahalanobis Z-scores against controls")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--control", choices=["train", "val", "test"], default="train")
    p.add_argument("--control-label", default=None, help="restrict controls to a class label")
    p.add_argument("--query", choices=["train", "val", "test"], default="test")
    p.add_argument("--pca-dims", type=int, default=None)
    p.add_argument(
        "--mean-shape",
        action="store_true",
        help="also write the mean shape image of the control segmentations",
    )
    p.set_defaults(func=cmd_zscore)

    p = sub.add_parser("sweep", parents=[common], help="cross-validate the lambda weight")
    p.add_argument("--lambdas", default="0,1e-4,1e-3,5e-3,1e-2")
    p.add_argument("--folds", type=int, default=3)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        args.func(args)
    except Exception as err:  # pylint: disable=broad-except
        logger.debug("command failed", exc_info=True)
        message = " ".join(str(err).split()) or type(err).__name__
        print(f"{PROG} {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0
