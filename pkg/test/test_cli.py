from pathlib import Path

from openlandmark import cli
from openlandmark.cli import main
from openlandmark.construct import TrainConfig
from openlandmark.dataset import Dataset
from openlandmark.prune import eval_pairs_from_dataset, subset_loss
from openlandmark.train import variant_mask
from openlandmark.utils.imageio import read_raw_image
from openlandmark.core.misc import LOCK_NAME
from openlandmark.encoder import load_checkpoint
from openlandmark.shapestats import export_features, read_features
import json
import pytest
import numpy as np
import pandas as pd

MEANS = np.array([[8.0, 8.0], [23.0, 8.0], [8.0, 23.0], [23.0, 23.0]])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert (
        main(
            ["synth", "--out", str(data), "--n-per-class", "10", "--size", "32",
             "--classes", "ellipse,lobed", "--seed", "1"]
        )
        == 0
    )
    export_features(root / "means.csv", [MEANS], ["mean"])
    config = root / "train.cfg"
    config.write_text(
        "n_landmarks = 4\n"
        "channels = 4, 8\n"
        "layers_per_block = 1, 1\n"
        "head_hidden = 8\n"
        "epochs = 1\n"
        "batch_pairs = 4\n"
        "max_pairs = 4\n"
        "val_max_pairs = 4\n"
        "learning_rate = 0.01\n"
        "lambda = 0.001\n"
        f"init_landmarks = {root / 'means.csv'}\n"
    )
    run = root / "run"
    manifest = data / "manifest.csv"
    assert main(["train", "--manifest", str(manifest), "--config", str(config), "--out", str(run)]) == 0
    return {"root": root, "manifest": str(manifest), "config": str(config), "run": run}


def test_synth_outputs(workspace):
    data = workspace["root"] / "data"
    assert len(list((data / "images").glob("*.png"))) == 20
    assert len(list((data / "masks").glob("*.png"))) == 20
    assert not (data / LOCK_NAME).exists()


def test_train_outputs(workspace):
    run = workspace["run"]
    ckpt = load_checkpoint(run / "checkpoint.npz")
    assert ckpt.image_shape == (32, 32)
    assert ckpt.architecture.n_landmarks == 4
    assert ckpt.metadata["config"]["lam"] == 0.001
    history = pd.read_csv(run / "history.csv")
    assert list(history.columns) == ["epoch", "train_loss", "val_match_loss", "mean_kappa", "wall_seconds"]
    assert list(history["epoch"]) == [0, 1]
    assert (run / "history.png").exists()
    assert not (run / LOCK_NAME).exists()


def test_infer(workspace, tmp_path):
    out = tmp_path / "infer"
    args = ["infer", "--manifest", workspace["manifest"], "--out", str(out),
            "--checkpoint", str(workspace["run"] / "checkpoint.npz"), "--split", "test"]
    assert main(args) == 0
    features = read_features(out / "landmarks.csv")
    assert features.shape == (2, 16)
    # anchors close every row
    np.testing.assert_array_equal(features.iloc[0, 8:].to_numpy(), [0, 0, 31, 0, 0, 31, 31, 31])


def test_register_self_pair(workspace, tmp_path):
    out = tmp_path / "register"
    args = ["register", "--manifest", workspace["manifest"], "--out", str(out),
            "--checkpoint", str(workspace["run"] / "checkpoint.npz"),
            "--source", "ellipse_000", "--target", "ellipse_000", "--loss", "ncc"]
    assert main(args) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["loss_kind"] == "ncc"
    assert stats["max_abs_residual"] <= 1e-12
    for name in ("registered.png", "residual.png", "overlay.png"):
        assert (out / name).exists()


def test_register_pair(workspace, tmp_path):
    out = tmp_path / "register"
    args = ["register", "--manifest", workspace["manifest"], "--out", str(out),
            "--checkpoint", str(workspace["run"] / "checkpoint.npz"),
            "--source", "ellipse_001", "--target", "lobed_002"]
    assert main(args) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert set(stats) == {
        "source", "target", "loss_kind", "match_loss_before", "match_loss_after",
        "max_abs_residual", "mean_abs_residual", "kappa", "system_residual",
    }
    assert np.isfinite(stats["match_loss_after"])
    assert stats["kappa"] > 0


def test_prune_then_infer(workspace, tmp_path):
    out = tmp_path / "prune"
    args = ["prune", "--manifest", workspace["manifest"], "--out", str(out),
            "--checkpoint", str(workspace["run"] / "checkpoint.npz"),
            "--target-count", "3", "--cap", "6"]
    assert main(args) == 0
    ckpt = load_checkpoint(out / "checkpoint.npz")
    assert len(ckpt.active_indices) == 3
    assert ckpt.prune_report[0]["removed_index"] == -1
    assert len(pd.read_csv(out / "prune_report.csv")) == 2

    args = ["infer", "--manifest", workspace["manifest"], "--out", str(out),
            "--checkpoint", str(out / "checkpoint.npz"), "--split", "val"]
    assert main(args) == 0
    assert read_features(out / "landmarks.csv").shape == (2, 14)


def test_zscore(workspace, tmp_path, capsys):
    out = tmp_path / "zscore"
    args = ["zscore", "--manifest", workspace["manifest"], "--out", str(out),
            "--checkpoint", str(workspace["run"] / "checkpoint.npz"),
            "--control-label", "ellipse", "--pca-dims", "2"]
    assert main(args) == 0
    scores = pd.read_csv(out / "scores.csv")
    assert list(scores.columns) == ["id", "split", "label", "zscore"]
    assert set(scores["split"]) == {"test"}
    assert (scores["zscore"] >= 0).all()
    assert "anomaly AUC" in capsys.readouterr().out


def test_zscore_mean_shape(workspace, tmp_path, capsys):
    out = tmp_path / "zscore"
    args = ["zscore", "--manifest", workspace["manifest"], "--out", str(out),
            "--checkpoint", str(workspace["run"] / "checkpoint.npz"),
            "--control-label", "ellipse", "--pca-dims", "2", "--mean-shape"]
    assert main(args) == 0
    assert (out / "mean_shape.png").exists()
    image = read_raw_image(out / "mean_shape.raw")
    assert image.shape == (32, 32)
    assert image.min() >= 0.0
    assert image.max() <= 1.0 + 1e-12
    assert image.max() > 0.5
    assert "mean shape of 8 controls" in capsys.readouterr().out


def test_prune_uses_training_settings(workspace, tmp_path):
    root = workspace["root"]
    config = root / "localized.cfg"
    config.write_text(
        Path(workspace["config"]).read_text()
        + "variant = localized\nmask_box = 4, 4, 27, 27\nloss_kind = ncc\nncc_patch = 3\n"
    )
    run = tmp_path / "run"
    args = ["train", "--manifest", workspace["manifest"], "--config", str(config),
            "--out", str(run)]
    assert main(args) == 0

    out = tmp_path / "prune"
    args = ["prune", "--manifest", workspace["manifest"], "--out", str(out),
            "--checkpoint", str(run / "checkpoint.npz"), "--target-count", "3", "--cap", "6"]
    assert main(args) == 0

    ckpt = load_checkpoint(run / "checkpoint.npz")
    trained = TrainConfig(**ckpt.metadata["config"])
    dataset = Dataset.read(workspace["manifest"])
    pairs = eval_pairs_from_dataset(ckpt.params, dataset, dataset.ids("train"), ckpt.anchors, 6, 0)
    mask = variant_mask(trained, dataset.image_shape)
    expected = subset_loss(pairs, [0, 1, 2, 3], "ncc", mask, 3, trained.mind)
    report = pd.read_csv(out / "prune_report.csv")
    assert report["baseline_loss"].iloc[0] == pytest.approx(expected, rel=1e-12)
    plain = subset_loss(pairs, [0, 1, 2, 3])
    assert report["baseline_loss"].iloc[0] != pytest.approx(plain, rel=1e-6)


def test_failed_train_writes_nothing(workspace, tmp_path, monkeypatch):
    def fail(fig, path):
        raise RuntimeError("disk full")

    monkeypatch.setattr(cli, "_save_figure", fail)
    out = tmp_path / "run"
    args = ["train", "--manifest", workspace["manifest"], "--config", workspace["config"],
            "--out", str(out)]
    assert main(args) == 1
    assert list(out.iterdir()) == []


def test_sweep(workspace, tmp_path):
    out = tmp_path / "sweep"
    args = ["sweep", "--manifest", workspace["manifest"], "--config", workspace["config"],
            "--out", str(out), "--lambdas", "0,1e-3", "--folds", "2"]
    assert main(args) == 0
    sweep = pd.read_csv(out / "sweep.csv", keep_default_na=False)
    assert list(sweep["lambda"]) == [0.0, 0.0, 0.001, 0.001]
    assert list(sweep["fold"]) == [0, 1, 0, 1]
    assert (out / "sweep.png").exists()


class TestErrors:
    def test_missing_checkpoint(self, workspace, tmp_path, capsys):
        args = ["infer", "--manifest", workspace["manifest"], "--out", str(tmp_path),
                "--checkpoint", str(tmp_path / "none.npz")]
        assert main(args) == 1
        last = capsys.readouterr().err.strip().splitlines()[-1]
        assert last.startswith("openlandmark infer: error:")
        assert "none.npz" in last

    def test_missing_manifest_flag(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path)]) == 1
        assert "--manifest is required" in capsys.readouterr().err

    def test_unknown_id(self, workspace, tmp_path):
        args = ["register", "--manifest", workspace["manifest"], "--out", str(tmp_path),
                "--checkpoint", str(workspace["run"] / "checkpoint.npz"),
                "--source", "square_000", "--target", "ellipse_000"]
        assert main(args) == 1

    def test_locked_output(self, workspace, tmp_path, capsys):
        (tmp_path / LOCK_NAME).write_text("123")
        args = ["infer", "--manifest", workspace["manifest"], "--out", str(tmp_path),
                "--checkpoint", str(workspace["run"] / "checkpoint.npz")]
        assert main(args) == 1
        assert "locked" in capsys.readouterr().err
        assert (tmp_path / LOCK_NAME).read_text() == "123"

    def test_prune_needs_stop_condition(self, workspace, tmp_path):
        args = ["prune", "--manifest", workspace["manifest"], "--out", str(tmp_path),
                "--checkpoint", str(workspace["run"] / "checkpoint.npz")]
        assert main(args) == 1

    def test_too_few_classes(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--classes", "ellipse"]) == 1

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["--version"])
        assert err.value.code == 0
        assert "openlandmark" in capsys.readouterr().out
