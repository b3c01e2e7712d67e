from openlandmark.core import kernel
from openlandmark.core import validation
from openlandmark.construct import LandmarkSet
import pytest
import numpy as np
import math as m


def random_points(rng, n, extent=127.0):
    return rng.uniform(0.0, extent, size=(n, 2))


def solvable_pair(rng, n):
    """Random (source, target) configuration whose system solves."""
    for _ in range(50):
        target = random_points(rng, n)
        source = target + rng.normal(0.0, 3.0, size=target.shape)
        system = kernel.build_system(source, target)
        try:
            return system, kernel.solve_system(system)
        except validation.SingularSystemError:
            continue
    raise RuntimeError("no solvable configuration drawn")


@pytest.fixture
def smooth_image():
    ys, xs = np.mgrid[0:16, 0:16].astype(float)
    return 0.5 + 0.25 * np.sin(xs / 3.0) * np.cos(ys / 4.0)


class TestRadialKernel:
    def test_values(self):
        assert kernel.tps_kernel(0.0) == 0.0
        assert kernel.tps_kernel(1.0) == 0.0
        assert m.isclose(float(kernel.tps_kernel(m.e)), m.e**2)

    def test_gradient(self):
        v = np.array([3.0, 4.0])
        expected = (2 * np.log(5.0) + 1.0) * v
        np.testing.assert_allclose(kernel.tps_kernel_gradient(v), expected)
        np.testing.assert_array_equal(kernel.tps_kernel_gradient(np.zeros(2)), np.zeros(2))


class TestSystem:
    def test_block_layout(self):
        pts = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0], [1.0, 1.0]])
        block = kernel.system_block(pts)
        assert block.shape == (7, 7)
        np.testing.assert_array_equal(block[0, :4], pts[:, 0])
        np.testing.assert_array_equal(block[1, :4], pts[:, 1])
        np.testing.assert_array_equal(block[2, :4], np.ones(4))
        np.testing.assert_array_equal(block[:3, 4:], np.zeros((3, 3)))
        np.testing.assert_array_equal(np.diag(block[3:, :4]), np.zeros(4))
        assert m.isclose(block[3, 1], 4.0 * np.log(2.0))
        np.testing.assert_array_equal(block[3:, 4:6], pts)
        np.testing.assert_array_equal(block[3:, 6], np.ones(4))

    def test_rhs_layout(self):
        pts = np.arange(8.0).reshape(4, 2)
        rhs = kernel.system_rhs(pts)
        np.testing.assert_array_equal(rhs[:3], np.zeros((3, 2)))
        np.testing.assert_array_equal(rhs[3:], pts)

    def test_full_matrix_matches_block(self):
        rng = np.random.default_rng(1)
        system, params = solvable_pair(rng, 8)
        a = system.matrix_a
        assert a.shape == (2 * 11, 2 * 11)
        w = np.linalg.solve(a, system.rhs_b)
        np.testing.assert_allclose(
            w, np.concatenate([params.weights[:, 0], params.weights[:, 1]]), rtol=1e-6, atol=1e-6
        )

    @pytest.mark.parametrize("n", [8, 16, 32])
    def test_interpolation_exactness(self, n):
        rng = np.random.default_rng(n)
        worst_error, worst_residual = 0.0, 0.0
        for _ in range(34):
            system, params = solvable_pair(rng, n)
            mapped = kernel.apply_transform(params, system.target_points)
            worst_error = max(worst_error, np.abs(mapped - system.source_points).max())
            worst_residual = max(worst_residual, kernel.system_residual(system, params))
        assert worst_error <= 1e-6
        assert worst_residual <= 1e-8

    def test_affine_reproduction(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            target = random_points(rng, 12)
            a = np.eye(2) + rng.normal(0.0, 0.1, size=(2, 2))
            t = rng.normal(0.0, 5.0, size=2)
            source = target @ a.T + t
            params = kernel.solve_system(kernel.build_system(source, target))
            assert np.linalg.norm(params.rbf_weights) <= 1e-8
            queries = random_points(rng, 30)
            np.testing.assert_allclose(
                kernel.apply_transform(params, queries), queries @ a.T + t, atol=1e-6
            )

    def test_identity_fast_path(self, smooth_image):
        pts = np.array([[2.0, 3.0], [12.0, 4.0], [7.0, 12.0], [5.0, 5.0], [10.0, 10.0]])
        params = kernel.solve_system(kernel.build_system(pts, pts))
        np.testing.assert_array_equal(params.weights, kernel.WarpParams.identity(pts).weights)
        np.testing.assert_array_equal(kernel.warp_image(smooth_image, params), smooth_image)

    def test_translation_warp(self, smooth_image):
        target = np.array([[0.0, 0.0], [15.0, 0.0], [0.0, 15.0], [15.0, 15.0], [6.0, 9.0]])
        source = target + [5.0, 0.0]
        params = kernel.solve_system(kernel.build_system(source, target))
        np.testing.assert_allclose(params.affine[-1], [5.0, 0.0], atol=1e-8)
        warped = kernel.warp_image(smooth_image, params)
        # T(x) = x + 5: the registered image is the source read 5 columns to the right
        np.testing.assert_allclose(warped[:, :11], smooth_image[:, 5:], atol=1e-8)

    def test_landmark_set_input(self):
        target = LandmarkSet(points=[[0.0, 0.0], [9.0, 0.0], [0.0, 9.0], [9.0, 9.0]])
        system = kernel.build_system(target, target)
        assert system.n_points == 4
        assert system.dim == 2

    def test_three_point_block(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        block = kernel.build_system(pts, pts).block
        assert block.shape == (6, 6)
        assert m.isclose(block[4, 2], m.log(2.0))

    def test_normalized_system_gives_same_transform(self):
        rng = np.random.default_rng(11)
        pixel_system, pixel_params = solvable_pair(rng, 10)
        source, target = pixel_system.source_points, pixel_system.target_points
        system = kernel.build_system(source, target, scale=kernel.coordinate_scale((128, 128)))
        params = kernel.solve_system(system)
        assert system.scale == 127.0
        assert kernel.system_residual(system, params) <= 1e-8
        np.testing.assert_allclose(kernel.apply_transform(params, target), source, atol=1e-6)
        queries = random_points(rng, 40)
        np.testing.assert_allclose(
            kernel.apply_transform(params, queries),
            kernel.apply_transform(pixel_params, queries),
            atol=1e-6,
        )
        # side conditions still hold on the pixel weights
        assert np.abs(params.rbf_weights.sum(axis=0)).max() <= 1e-8
        assert np.abs(target.T @ params.rbf_weights).max() <= 1e-8

    def test_translation_in_normalized_system(self):
        target = np.array([[10.0, 12.0], [90.0, 15.0], [20.0, 100.0], [110.0, 95.0], [60.0, 60.0]])
        params = kernel.solve_system(kernel.build_system(target + [5.0, 0.0], target, scale=127.0))
        assert np.linalg.norm(params.rbf_weights) <= 1e-8
        np.testing.assert_allclose(params.affine[-1], [5.0, 0.0], atol=1e-8)
        np.testing.assert_allclose(kernel.apply_transform(params, [[10.0, 20.0]]), [[15.0, 20.0]], atol=1e-8)


class TestSystemErrors:
    def test_too_few_points(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(validation.UserInputError):
            kernel.build_system(pts, pts)

    def test_size_mismatch(self):
        with pytest.raises(validation.UserInputError):
            kernel.build_system(np.zeros((5, 2)), np.zeros((6, 2)))

    def test_non_finite(self):
        pts = np.array([[0.0, 0.0], [9.0, 0.0], [0.0, 9.0], [9.0, np.inf]])
        with pytest.raises(validation.NonFiniteError):
            kernel.build_system(pts, np.zeros((4, 2)))

    def test_coincident_points(self):
        target = np.array([[0.0, 0.0], [9.0, 0.0], [0.0, 9.0], [4.0, 4.0], [4.0, 4.0]])
        system = kernel.build_system(target + 1.0, target)
        with pytest.raises(validation.SingularSystemError) as err:
            kernel.solve_system(system)
        assert err.value.condition > 1e12

    def test_collinear_points(self):
        target = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [5.0, 5.0]])
        with pytest.raises(validation.SingularSystemError):
            kernel.solve_system(kernel.build_system(target + 1.0, target))

    def test_bad_scale(self):
        pts = np.array([[0.0, 0.0], [9.0, 0.0], [0.0, 9.0], [9.0, 9.0]])
        with pytest.raises(validation.UserInputError):
            kernel.build_system(pts, pts, scale=0.0)

    def test_unknown_kernel(self):
        pts = np.eye(4, 2)
        with pytest.raises(validation.UserInputError):
            kernel.build_system(pts, pts, kernel="Gaussian")


class TestCondition:
    def test_frobenius_condition(self):
        assert m.isclose(kernel.frobenius_condition(np.diag([1.0, 2.0])), 2.5)
        assert m.isclose(kernel.frobenius_condition(np.eye(3)), 3.0)

    def test_non_square(self):
        with pytest.raises(validation.UserInputError):
            kernel.frobenius_condition(np.zeros((2, 3)))

    def test_condition_number_of_system(self):
        rng = np.random.default_rng(3)
        system, _ = solvable_pair(rng, 8)
        expected = 2 * np.linalg.norm(system.block) * np.linalg.norm(np.linalg.inv(system.block))
        assert m.isclose(kernel.condition_number(system), expected, rel_tol=1e-8)

    def test_condition_grows_as_points_merge(self):
        base = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0], [5.0, 5.0], [12.0, 9.0]])
        kappas = []
        for gap in (5.0, 0.5, 0.05):
            pts = base.copy()
            pts[5] = pts[4] + [gap, 0.0]
            kappas.append(kernel.condition_number(kernel.build_system(pts, pts)))
        assert kappas[0] < kappas[1] < kappas[2]

    def test_condition_grows_along_collapse_sequence(self):
        # image-scale layout in a 128 x 128 frame, point 7 moves onto point 4
        base = np.array(
            [
                [20.0, 20.0],
                [100.0, 24.0],
                [30.0, 96.0],
                [104.0, 100.0],
                [60.0, 40.0],
                [45.0, 70.0],
                [85.0, 65.0],
                [0.0, 0.0],
            ]
        )
        scale = kernel.coordinate_scale((128, 128))
        kappas = []
        for gap in (8.0, 4.0, 2.0, 1.0, 0.5, 0.25):
            pts = base.copy()
            pts[7] = pts[4] + [gap, 0.0]
            kappas.append(kernel.condition_number(kernel.build_system(pts, pts, scale=scale)))
        assert all(a < b for a, b in zip(kappas, kappas[1:]))

    def test_condition_does_not_depend_on_image_size(self):
        rng = np.random.default_rng(4)
        pts = random_points(rng, 12)
        small = kernel.build_system(pts, pts, scale=kernel.coordinate_scale((128, 128)))
        large = kernel.build_system(2.0 * pts, 2.0 * pts, scale=kernel.coordinate_scale((255, 255)))
        assert m.isclose(
            kernel.condition_number(small), kernel.condition_number(large), rel_tol=1e-12
        )

    def test_coordinate_scale(self):
        assert kernel.coordinate_scale((64, 128)) == 127.0
        assert kernel.coordinate_scale((1, 1)) == 1.0


class TestAnchors:
    def test_append_corners(self):
        lms = LandmarkSet(points=[[3.0, 4.0], [5.0, 6.0]])
        out = kernel.append_anchors(lms, (32, 16))
        assert out.n_points == 6
        assert out.anchor_count == 4
        np.testing.assert_array_equal(out.anchors, [[0, 0], [31, 0], [0, 15], [31, 15]])

    def test_no_anchors(self):
        lms = LandmarkSet(points=[[3.0, 4.0]])
        assert kernel.append_anchors(lms, (8, 8), count=0) is lms

    def test_bad_count(self):
        lms = LandmarkSet(points=[[3.0, 4.0]])
        with pytest.raises(validation.UserInputError):
            kernel.append_anchors(lms, (8, 8), count=2)


class TestSampling:
    def test_pixel_grid_order(self):
        np.testing.assert_array_equal(
            kernel.pixel_grid((2, 3)), [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]]
        )

    def test_integer_and_midpoints(self, smooth_image):
        coords = np.array([[3.0, 2.0], [15.0, 15.0], [3.5, 2.0], [3.5, 2.5]])
        out = kernel.sample_image(smooth_image, coords)
        assert out[0] == smooth_image[2, 3]
        assert out[1] == smooth_image[15, 15]
        assert m.isclose(out[2], 0.5 * (smooth_image[2, 3] + smooth_image[2, 4]))
        assert m.isclose(out[3], smooth_image[2:4, 3:5].mean())

    def test_clamped_outside(self, smooth_image):
        out = kernel.sample_image(smooth_image, np.array([[-4.0, 2.0], [30.0, 40.0]]))
        assert out[0] == smooth_image[2, 0]
        assert out[1] == smooth_image[15, 15]
        grad = kernel.bilinear_sample_vjp(smooth_image, np.array([[-4.0, 2.0]]), np.ones(1))
        assert grad[0, 0] == 0.0

    def test_vjp_matches_finite_differences(self, smooth_image):
        rng = np.random.default_rng(5)
        coords = rng.uniform(1.1, 13.9, size=(20, 2)) + 0.25
        g = rng.normal(size=20)
        grad = kernel.bilinear_sample_vjp(smooth_image, coords, g)
        h = 1e-6
        for axis in range(2):
            step = np.zeros_like(coords)
            step[:, axis] = h
            fd = (
                kernel.sample_image(smooth_image, coords + step)
                - kernel.sample_image(smooth_image, coords - step)
            ) / (2 * h)
            np.testing.assert_allclose(grad[:, axis], g * fd, rtol=1e-5, atol=1e-8)

    def test_warp_needs_2d(self):
        params = kernel.WarpParams.identity(np.eye(4, 2))
        with pytest.raises(validation.UserInputError):
            kernel.warp_image(np.zeros((4, 4, 4)), params)
