from openlandmark import prune
from openlandmark.construct import Architecture, corner_points
from openlandmark.core import kernel, validation
from openlandmark.encoder import init_params
from openlandmark.utils.synth import synthetic_dataset
import pytest
import numpy as np

SIZE = 32
CORNERS = corner_points((SIZE, SIZE))
TARGET = np.array([[8.0, 9.0], [22.0, 7.0], [9.0, 23.0], [23.0, 22.0], [15.0, 16.0]])
SHIFTS = np.array([[2.0, -1.0], [-1.5, 2.0], [1.0, 1.5], [-2.0, -1.0]])


def source_image():
    ys, xs = np.mgrid[0:SIZE, 0:SIZE].astype(float)
    return 0.5 + 0.3 * np.sin(xs / 3.0) * np.cos(ys / 4.0)


def redundant_pair():
    """Pair whose last learned landmark is already interpolated by the others.

    The target image is the source warped with every landmark, so the full set
    registers the pair exactly and leaving out landmark 4 changes nothing.
    """
    source_pts = TARGET[:4] + SHIFTS
    partial = kernel.solve_system(
        kernel.build_system(np.vstack([source_pts, CORNERS]), np.vstack([TARGET[:4], CORNERS]))
    )
    extra = kernel.apply_transform(partial, TARGET[4:])
    source_pts = np.vstack([source_pts, extra])
    full = kernel.solve_system(
        kernel.build_system(np.vstack([source_pts, CORNERS]), np.vstack([TARGET, CORNERS]))
    )
    img = source_image()
    return prune.EvalPair(
        source_image=img,
        target_image=kernel.warp_image(img, full),
        source_points=source_pts,
        target_points=TARGET.copy(),
        anchors=CORNERS,
    )


@pytest.fixture
def pairs():
    return [redundant_pair()]


class TestImportance:
    def test_redundant_landmark_is_least_important(self, pairs):
        scores = prune.importance_scores(pairs)
        assert set(scores) == {0, 1, 2, 3, 4}
        assert abs(scores[4]) <= 1e-12
        assert min(scores[i] for i in range(4)) > 1e-6

    def test_matches_recomputation(self, pairs):
        scores = prune.importance_scores(pairs, active=[0, 1, 2, 4])
        baseline = prune.subset_loss(pairs, [0, 1, 2, 4])
        for i in (0, 1, 2, 4):
            rest = [j for j in (0, 1, 2, 4) if j != i]
            assert abs(scores[i] - (prune.subset_loss(pairs, rest) - baseline)) <= 1e-10

    def test_workers(self, pairs):
        assert prune.importance_scores(pairs, workers=2) == prune.importance_scores(pairs)

    def test_full_set_registers_exactly(self, pairs):
        assert prune.subset_loss(pairs, [0, 1, 2, 3, 4]) <= 1e-20


class TestGreedy:
    def test_removes_redundant_first(self, pairs):
        report = prune.greedy_prune(pairs, target_count=3)
        assert report.removed[0] == 4
        assert len(report.surviving) == 3
        assert len(report.baseline_losses) == 3
        df = report.to_dataframe()
        assert list(df.columns) == prune.REPORT_COLUMNS
        assert list(df["step"]) == [0, 1, 2]
        assert df["removed_index"].iloc[0] == -1
        assert list(df["removed_index"].iloc[1:]) == report.removed

    def test_max_delta(self, pairs):
        report = prune.greedy_prune(pairs, max_delta=1e-9)
        assert report.removed == [4]
        assert report.surviving == [0, 1, 2, 3]

    def test_target_equal_to_current(self, pairs):
        report = prune.greedy_prune(pairs, target_count=5)
        assert report.removed == []
        assert report.surviving == [0, 1, 2, 3, 4]
        records = report.to_records()
        assert len(records) == 1
        assert records[0]["removed_index"] == -1
        assert records[0]["importance"] is None

    def test_start_from_active_subset(self, pairs):
        report = prune.greedy_prune(pairs, target_count=3, active=[0, 1, 3, 4])
        assert report.original == [0, 1, 3, 4]
        assert len(report.removed) == 1
        assert set(report.surviving) < {0, 1, 3, 4}
    def test_importances_recomputed_after_each_removal(self):
        grid = np.array([[x, y] for y in (5.0, 12.0, 19.0, 26.0) for x in (5.0, 12.0, 19.0, 26.0)])
        rng = np.random.default_rng(6)
        source_pts = grid + rng.uniform(-1.5, 1.5, size=grid.shape)
        full = kernel.solve_system(
            kernel.build_system(np.vstack([source_pts, CORNERS]), np.vstack([grid, CORNERS]))
        )
        img = source_image()
        pairs = [
            prune.EvalPair(
                source_image=img,
                target_image=kernel.warp_image(img, full),
                source_points=source_pts,
                target_points=grid,
                anchors=CORNERS,
            )
        ]
        report = prune.greedy_prune(pairs, target_count=11)
        assert len(report.removed) == 5
        assert len(report.surviving) == 11

        active, previous = list(range(16)), None
        for step, removed in enumerate(report.removed):
            baseline = prune.subset_loss(pairs, active)
            assert report.baseline_losses[step] == pytest.approx(baseline, rel=1e-12)
            scores = prune.importance_scores(pairs, active, baseline=baseline)
            assert removed == min(active, key=lambda i: (scores[i], i))
            assert report.importances[step] == pytest.approx(scores[removed], rel=1e-12, abs=1e-15)
            assert report.baseline_losses[step + 1] == pytest.approx(
                report.baseline_losses[step] + report.importances[step], abs=1e-12
            )
            if previous is not None:
                shared = [i for i in active if i in previous]
                assert max(abs(scores[i] - previous[i]) for i in shared) > 1e-9
            previous = scores
            active.remove(removed)
        assert active == report.surviving


    def test_csv(self, pairs, tmp_path):
        report = prune.greedy_prune(pairs, target_count=4)
        path = report.to_csv(tmp_path / "prune_report.csv")
        assert path.read_text().splitlines()[0] == "step,removed_index,importance,baseline_loss"


class TestErrors:
    def test_no_stop_condition(self, pairs):
        with pytest.raises(validation.UserInputError):
            prune.greedy_prune(pairs)

    def test_target_above_active(self, pairs):
        with pytest.raises(validation.UserInputError):
            prune.greedy_prune(pairs, target_count=6)

    def test_too_few_control_points(self, pairs):
        with pytest.raises(validation.UserInputError):
            prune.greedy_prune(pairs, target_count=0)
        pair = pairs[0]
        bare = prune.EvalPair(pair.source_image, pair.target_image, pair.source_points, pair.target_points)
        with pytest.raises(validation.UserInputError):
            prune.greedy_prune([bare], target_count=2)

    def test_no_pairs(self):
        with pytest.raises(validation.UserInputError):
            prune.importance_scores([])


def test_separate_coincident():
    points = np.array([[3.0, 3.0], [3.0, 3.0], [0.0, 0.0], [9.0, 9.0]])
    out = prune.separate_coincident(points, n_movable=2)
    assert np.linalg.norm(out[0] - out[1]) >= prune.COINCIDENT_DISTANCE
    np.testing.assert_array_equal(out[2:], points[2:])
    np.testing.assert_array_equal(prune.separate_coincident(out, 2), out)


def test_eval_pairs_from_dataset():
    dataset = synthetic_dataset(3, seed=1, size=SIZE)
    arch = Architecture(
        input_shape=(SIZE, SIZE), n_landmarks=5, channels=(4, 8), layers_per_block=(1, 1), head_hidden=0
    )
    pairs = prune.eval_pairs_from_dataset(init_params(0, arch), dataset, cap=5, seed=2)
    assert len(pairs) == 5
    assert all(p.source_id != p.target_id for p in pairs)
    assert pairs[0].n_learned == 5
    np.testing.assert_array_equal(pairs[0].anchors, CORNERS)
