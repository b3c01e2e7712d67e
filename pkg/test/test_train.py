from openlandmark import train as tr
from openlandmark.construct import TrainConfig
from openlandmark.dataset import Dataset
from openlandmark.core import validation
from openlandmark.encoder import init_params
from openlandmark.utils.synth import synthetic_dataset
import pytest
import numpy as np

MEANS = np.array([[8.0, 8.0], [23.0, 8.0], [8.0, 23.0], [23.0, 23.0]])


@pytest.fixture(scope="module")
def dataset():
    # 10 images per class: 8 train, 1 val, 1 test each
    return synthetic_dataset(10, seed=3, size=32)


def small_config(**kwargs):
    base = dict(
        n_landmarks=4,
        channels=(4, 8),
        layers_per_block=(1, 1),
        head_hidden=8,
        epochs=2,
        batch_pairs=4,
        max_pairs=8,
        learning_rate=1e-3,
        lam=1e-4,
    )
    base.update(kwargs)
    return TrainConfig(**base)


def start(config, means=MEANS):
    return init_params(config.seed, config.architecture((32, 32)), mean_landmarks=means)


class TestPairs:
    def test_all_pairs(self):
        pairs = tr.make_pairs(["a", "b", "c", "d"])
        assert len(pairs) == 12
        assert all(p.source != p.target for p in pairs)

    def test_random_k(self):
        ids = [f"i{k}" for k in range(6)]
        a = tr.make_pairs(ids, "random_k", seed=1, k=7)
        b = tr.make_pairs(ids, "random_k", seed=1, k=7)
        assert len(a) == 7
        assert [(p.source, p.target) for p in a] == [(p.source, p.target) for p in b]
        assert len({(p.source, p.target) for p in a}) == 7

    def test_random_k_too_many(self):
        with pytest.raises(validation.UserInputError):
            tr.make_pairs(["a", "b"], "random_k", k=3)

    def test_single_image(self):
        with pytest.raises(validation.UserInputError):
            tr.make_pairs(["a"])

    def test_segmentation_ids(self):
        pairs = tr.make_pairs(["a", "b", "c"], segmented={"a", "b"})
        first = pairs[0]
        assert (first.source, first.target) == ("a", "b")
        assert first.has_segmentations
        assert not pairs[1].has_segmentations


class TestTrain:
    def test_history(self, dataset):
        config = small_config()
        result = tr.train(config, dataset, start(config))
        assert list(result.history.columns) == tr.HISTORY_COLUMNS
        assert list(result.history["epoch"]) == [0, 1, 2]
        assert np.isfinite(result.history[["train_loss", "val_match_loss", "mean_kappa"]].values).all()
        assert result.best_epoch in (0, 1, 2)
        assert result.best_val_match_loss == result.history["val_match_loss"].min()
        assert result.details()["epochs run"] == 2

    def test_zero_learning_rate_stops_early(self, dataset):
        config = small_config(learning_rate=0.0, epochs=6, early_stop_patience=2)
        init = start(config)
        result = tr.train(config, dataset, init)
        assert len(result.history) == 3
        assert result.stopped_early
        assert result.best_epoch == 0
        np.testing.assert_array_equal(result.params.flatten(), init.flatten())
        np.testing.assert_array_equal(result.final_params.flatten(), init.flatten())
        assert result.history["val_match_loss"].nunique() == 1

    def test_init_left_untouched(self, dataset):
        config = small_config(epochs=1)
        init = start(config)
        before = init.flatten().copy()
        tr.train(config, dataset, init)
        np.testing.assert_array_equal(init.flatten(), before)

    def test_identical_landmarks_match_unregistered(self, dataset):
        config = small_config()
        pairs = tr.validation_pairs(dataset, config)
        registered = tr.validation_match(start(config), dataset, pairs, config)
        assert registered == pytest.approx(tr.unregistered_match(dataset, pairs, config), rel=1e-12)

    def test_rerun_is_bit_exact(self, dataset):
        config = small_config()
        a = tr.train(config, dataset, start(config))
        b = tr.train(config, dataset, start(config))
        cols = ["epoch", "train_loss", "val_match_loss", "mean_kappa"]
        assert a.history[cols].equals(b.history[cols])
        np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())

    def test_workers_do_not_change_result(self, dataset):
        config = small_config(epochs=1)
        a = tr.train(config, dataset, start(config))
        b = tr.train(config.replace(workers=2), dataset, start(config))
        np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())

    def test_zero_lambda_warns(self, dataset):
        config = small_config(lam=0.0, epochs=1)
        with pytest.warns(UserWarning):
            tr.train(config, dataset, start(config))

    def test_singular_system_aborts(self, dataset):
        config = small_config(epochs=1)
        coincident = np.array([[8.0, 8.0], [8.0, 8.0], [23.0, 8.0], [8.0, 23.0]])
        with pytest.raises(validation.TrainingAbortedError) as err:
            tr.train(config, dataset, start(config, coincident))
        assert "epoch 0, batch 1" in str(err.value)

    def test_shape_mismatch(self, dataset):
        config = small_config()
        init = init_params(0, config.architecture((64, 64)))
        with pytest.raises(validation.UserInputError):
            tr.train(config, dataset, init)

    def test_landmark_spread(self, dataset):
        config = small_config()
        images = dataset.stack(dataset.ids("val"))
        assert tr.landmark_spread(start(config), images) == pytest.approx(15.0)

    def test_baseline_row(self, dataset):
        config = small_config(epochs=1)
        result = tr.train(config, dataset, start(config))
        first = result.history.iloc[0]
        assert first["epoch"] == 0
        pairs = tr.validation_pairs(dataset, config)
        assert first["val_match_loss"] == pytest.approx(
            tr.unregistered_match(dataset, pairs, config), rel=1e-12
        )
        assert result.details()["epochs run"] == 1

    def test_first_update_lowers_held_out_loss(self, dataset):
        ids = dataset.ids("train")[:3]
        config = small_config(lam=0.0, learning_rate=1e-6, epochs=1, batch_pairs=6, max_pairs=None)
        init = init_params(config.seed, config.architecture((32, 32)))
        with pytest.warns(UserWarning):
            result = tr.train(config, dataset, init, train_ids=ids, val_ids=ids)
        val = result.history["val_match_loss"]
        assert val.iloc[1] < val.iloc[0]
        assert result.best_epoch == 1

    def test_regulariser_separates_close_landmarks(self, dataset):
        close = np.array([[8.0, 8.0], [8.25, 8.0], [23.0, 8.0], [8.0, 23.0]])
        config = small_config(lam=1.0, learning_rate=0.1)
        init = start(config, close)
        result = tr.train(config, dataset, init)
        kappa = result.history["mean_kappa"]
        assert kappa.iloc[-1] * 10 <= kappa.iloc[0]
        images = dataset.stack(dataset.ids("val"))
        assert tr.landmark_spread(init, images) == pytest.approx(0.25, abs=1e-5)
        assert tr.landmark_spread(result.final_params, images) > 0.25

    def test_regulariser_against_no_regulariser(self, dataset):
        # identical images leave only the regulariser to move the landmarks
        image = dataset.images[dataset.ids("train")[0]]
        ids = [f"copy{k}" for k in range(6)]
        copies = Dataset(
            images={i: image for i in ids},
            splits={i: "train" if k < 4 else "val" for k, i in enumerate(ids)},
        )
        close = np.array([[8.0, 8.0], [8.25, 8.0], [23.0, 8.0], [8.0, 23.0]])
        # a large epsilon damps the round-off gradient of the matching term
        config = small_config(
            learning_rate=0.1, epochs=3, max_pairs=None, batch_pairs=12, adam_eps=1e-3
        )
        with pytest.warns(UserWarning):
            plain = tr.train(config.replace(lam=0.0), copies, start(config, close))
        regularised = tr.train(config.replace(lam=1.0), copies, start(config, close))
        flat = plain.history.set_index("epoch")["mean_kappa"]
        reg = regularised.history.set_index("epoch")["mean_kappa"]
        assert flat[3] >= 0.5 * flat[0]
        assert reg[3] * 10 <= flat[3]
        images = copies.stack(ids[4:])
        assert tr.landmark_spread(regularised.final_params, images) > tr.landmark_spread(
            plain.final_params, images
        )


class TestLambdaSweep:
    def test_rows(self, dataset):
        config = small_config(epochs=1, max_pairs=4)
        table = tr.lambda_sweep(config, dataset, [1e-3, 0.0], folds=2, init=start(config))
        assert list(table.columns) == ["lambda", "fold", "val_match_loss", "mean_kappa", "error"]
        assert list(table["lambda"]) == [0.0, 0.0, 1e-3, 1e-3]
        assert list(table["fold"]) == [0, 1, 0, 1]
        assert (table["error"] == "").all()
        assert np.isfinite(table["val_match_loss"]).all()

    def test_needs_two_folds(self, dataset):
        with pytest.raises(validation.UserInputError):
            tr.lambda_sweep(small_config(), dataset, [0.0], folds=1)

    def test_needs_lambdas(self, dataset):
        with pytest.raises(validation.UserInputError):
            tr.lambda_sweep(small_config(), dataset, [])

    def test_too_few_images(self):
        tiny = synthetic_dataset(2, seed=0, size=32)
        with pytest.raises(validation.UserInputError):
            tr.lambda_sweep(small_config(), tiny, [0.0], folds=3)
