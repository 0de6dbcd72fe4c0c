"""
Tests for core.deform: the B-spline mesh, its dense field, the zero-mean
projection, prolongation, inversion and the two ways of reaching frame 1.
"""
import math

import numpy as np
import pytest

from core.deform import (
    ControlMesh,
    DeformError,
    bspline_weights,
    compose_pairwise_chain,
    compose_to_first_frame,
    dense_displacement,
    evaluate_displacement,
    evaluate_points,
    invert_displacement,
    mesh_size,
    project_zero_mean,
    prolong_mesh,
    zero_mesh,
)


def _clamped_bilinear(field, x, y):
    n_y, n_x = field.shape[:2]
    x = min(max(x, 0.0), n_x - 1.0)
    y = min(max(y, 0.0), n_y - 1.0)
    x0 = min(int(math.floor(x)), n_x - 2)
    y0 = min(int(math.floor(y)), n_y - 2)
    fx, fy = x - x0, y - y0
    return (
        (1 - fx) * (1 - fy) * field[y0, x0]
        + fx * (1 - fy) * field[y0, x0 + 1]
        + (1 - fx) * fy * field[y0 + 1, x0]
        + fx * fy * field[y0 + 1, x0 + 1]
    )


def _smooth_field(n, amplitude=0.8, phase=0.0):
    ys, xs = np.mgrid[0:n, 0:n].astype(float)
    return amplitude * np.stack(
        [np.sin(0.3 * xs + phase) * np.cos(0.2 * ys), np.cos(0.25 * ys - phase)], axis=-1
    )


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestMesh:
    def test_mesh_size(self):
        assert mesh_size(64, 6) == 14
        assert mesh_size(7, 6) == 5

    def test_rejects_wrong_shape(self):
        with pytest.raises(DeformError, match="does not serve"):
            ControlMesh(np.zeros((2, 5, 5, 2)), spacing=6, grid=(64, 64))

    def test_rejects_non_finite_values(self):
        values = np.zeros((2, 5, 5, 2))
        values[0, 0, 0, 0] = np.inf

        with pytest.raises(DeformError, match="non-finite"):
            ControlMesh(values, spacing=6, grid=(8, 8))


class TestBsplineWeights:
    def test_at_zero(self):
        np.testing.assert_allclose(bspline_weights(0.0), [1 / 6, 4 / 6, 1 / 6, 0.0], atol=1e-15)

    def test_at_half(self):
        np.testing.assert_allclose(bspline_weights(0.5), [1 / 48, 23 / 48, 23 / 48, 1 / 48], atol=1e-15)

    @pytest.mark.parametrize("u", [0.0, 0.1, 0.37, 0.5, 0.999])
    def test_partition_of_unity(self, u):
        assert bspline_weights(u).sum() == pytest.approx(1.0, abs=1e-15)

    def test_rejects_fraction_outside_unit_interval(self):
        with pytest.raises(DeformError):
            bspline_weights(1.0)


class TestEvaluateDisplacement:
    def test_zero_mesh(self):
        mesh = zero_mesh((20, 20), 3, 6)

        assert not evaluate_displacement(mesh, (7.5, 3.0), 2).any()

    def test_single_control_point(self):
        mesh = zero_mesh((20, 20), 2, 6)
        values = mesh.values.copy()
        values[1, 3, 2] = (1.0, 0.0)  # (t, j0, i0)
        mesh = mesh.with_values(values)
        x, y = 9.0, 14.5  # 1-based; 0-based (8, 13.5)
        i, u = divmod(8.0 / 6, 1.0)
        j, v = divmod(13.5 / 6, 1.0)

        expected = bspline_weights(u)[2 - int(i)] * bspline_weights(v)[3 - int(j)]

        np.testing.assert_allclose(evaluate_displacement(mesh, (x, y), 2), [expected, 0.0], atol=1e-15)

    def test_constant_mesh_gives_constant_field(self):
        mesh = zero_mesh((16, 16), 1, 5)
        mesh = mesh.with_values(np.broadcast_to([0.3, -0.7], mesh.values.shape).copy())

        np.testing.assert_allclose(evaluate_displacement(mesh, (4.2, 11.9), 1), [0.3, -0.7], atol=1e-14)

    def test_rejects_points_outside_grid(self):
        with pytest.raises(DeformError, match="outside"):
            evaluate_displacement(zero_mesh((8, 8), 2, 6), (0.5, 3.0), 1)


class TestDenseDisplacement:
    def test_zero_mesh_gives_zero_field(self):
        assert not dense_displacement(zero_mesh((12, 10), 3, 4)).any()

    def test_agrees_with_pointwise_evaluation(self, rng):
        mesh = zero_mesh((30, 25), 4, 6)
        mesh = mesh.with_values(rng.normal(size=mesh.values.shape))
        dense = dense_displacement(mesh)

        for _ in range(1000):
            x, y, t = rng.integers(0, 30), rng.integers(0, 25), rng.integers(0, 4)
            expected = evaluate_displacement(mesh, (x + 1.0, y + 1.0), t + 1)
            np.testing.assert_allclose(dense[t, y, x], expected, atol=1e-12)

    def test_constant_per_frame(self):
        mesh = zero_mesh((16, 12), 2, 6)
        values = np.zeros(mesh.values.shape)
        values[0] = (1.0, 2.0)
        values[1] = (-1.0, -2.0)

        dense = dense_displacement(mesh.with_values(values))

        np.testing.assert_allclose(dense[0], np.broadcast_to([1.0, 2.0], dense[0].shape), atol=1e-13)
        np.testing.assert_allclose(dense[1], np.broadcast_to([-1.0, -2.0], dense[1].shape), atol=1e-13)


class TestProjectZeroMean:
    def test_constant_in_time_vanishes(self):
        mesh = zero_mesh((8, 8), 4, 6)
        mesh = mesh.with_values(np.full(mesh.values.shape, 2.5))

        assert np.abs(project_zero_mean(mesh).values).max() <= 1e-15

    def test_idempotent(self, rng):
        mesh = zero_mesh((8, 8), 5, 6)
        once = project_zero_mean(mesh.with_values(rng.normal(size=mesh.values.shape)))

        np.testing.assert_allclose(project_zero_mean(once).values, once.values, atol=1e-15)

    def test_subtracts_the_temporal_mean(self):
        mesh = zero_mesh((8, 8), 4, 6)
        values = np.zeros(mesh.values.shape)
        values[:, 1, 1, 0] = [1.0, 2.0, 3.0, 4.0]

        projected = project_zero_mean(mesh.with_values(values))

        np.testing.assert_allclose(projected.values[:, 1, 1, 0], [-1.5, -0.5, 0.5, 1.5])
        np.testing.assert_allclose(projected.values[:, 1, 1, 1], 0.0)


class TestProlongMesh:
    def test_zero_stays_zero(self):
        fine = prolong_mesh(zero_mesh((16, 16), 3, 6), (32, 32), 6)

        assert fine.grid == (32, 32)
        assert not fine.values.any()

    def test_constant_field_doubles(self):
        coarse = zero_mesh((16, 16), 2, 6)
        values = np.zeros(coarse.values.shape)
        values[0] = (0.5, -0.25)
        values[1] = (-0.5, 0.25)

        fine = dense_displacement(prolong_mesh(coarse.with_values(values), (32, 32), 6))

        np.testing.assert_allclose(fine[0], np.broadcast_to([1.0, -0.5], fine[0].shape), atol=1e-6)
        np.testing.assert_allclose(fine[1], np.broadcast_to([-1.0, 0.5], fine[1].shape), atol=1e-6)

    def test_matches_upsampled_coarse_field(self):
        """The fine field reproduces 2x the coarse field read at the matching positions"""
        coarse = zero_mesh((32, 32), 1, 6)
        n_j, n_i = coarse.values.shape[1:3]
        jj, ii = np.mgrid[0:n_j, 0:n_i].astype(float)
        values = np.stack([0.5 * np.sin(0.35 * ii) * np.cos(0.2 * jj), 0.4 * np.cos(0.3 * jj + 0.5)], axis=-1)
        coarse = coarse.with_values(values[None])

        fine = dense_displacement(prolong_mesh(coarse, (64, 64), 6, zero_mean=False))[0]
        ys, xs = np.mgrid[0:64, 0:64].astype(float)
        oracle = 2.0 * evaluate_points(coarse.values[0], (xs - 0.5) / 2, (ys - 0.5) / 2, 6)

        assert np.abs(fine - oracle).max() <= 0.1

    def test_rejects_non_refinement(self):
        with pytest.raises(DeformError, match="refinement"):
            prolong_mesh(zero_mesh((16, 16), 2, 6), (40, 40), 6)


class TestInvertDisplacement:
    def test_zero_field(self):
        result = invert_displacement(np.zeros((10, 10, 2)))

        assert not result.field.any()
        assert result.converged

    def test_translation_is_exact(self):
        d1 = np.broadcast_to([1.25, -0.5], (12, 12, 2)).copy()

        result = invert_displacement(d1)

        np.testing.assert_allclose(result.field, -d1, atol=1e-12)

    def test_linear_expansion(self):
        ys, xs = np.mgrid[0:21, 0:21].astype(float)
        a, c = 0.2, 10.0
        d1 = a * np.stack([xs - c, ys - c], axis=-1)

        result = invert_displacement(d1)

        expected = -(a / (1 + a)) * np.stack([xs - c, ys - c], axis=-1)
        assert np.abs(result.field - expected).max() <= 1e-3
        assert result.converged


class TestComposeToFirstFrame:
    def test_zero_displacement(self):
        traj = compose_to_first_frame(np.zeros((4, 10, 10, 2)))

        assert not traj.values.any()
        assert traj.converged

    def test_translations(self):
        shifts = np.array([[0.6, -0.3], [0.2, 0.5], [-0.4, 0.1], [-0.4, -0.3]])
        disp = np.broadcast_to(shifts[:, None, None, :], (4, 10, 10, 2)).copy()

        traj = compose_to_first_frame(disp)

        for t in range(4):
            np.testing.assert_allclose(traj.values[t], np.broadcast_to(shifts[t] - shifts[0], (10, 10, 2)), atol=1e-12)

    def test_first_frame_is_forced_to_zero(self, rng):
        disp = np.stack([_smooth_field(12, phase=p) for p in (0.0, 0.5, 1.0)])

        assert not compose_to_first_frame(disp).values[0].any()


class TestComposePairwiseChain:
    def test_zero_steps(self):
        traj = compose_pairwise_chain([np.zeros((8, 8, 2))] * 3)

        assert traj.frames == 4
        assert not traj.values.any()

    def test_two_unit_translations(self):
        step = np.broadcast_to([1.0, 0.0], (8, 8, 2)).copy()

        traj = compose_pairwise_chain([step, step])

        np.testing.assert_allclose(traj.values[2], np.broadcast_to([2.0, 0.0], (8, 8, 2)))

    def test_matches_recursive_oracle(self):
        steps = [_smooth_field(10, amplitude=0.7, phase=p) for p in (0.0, 0.8, 1.6)]

        traj = compose_pairwise_chain(steps)

        for y in range(10):
            for x in range(10):
                current = np.zeros(2)
                for t, step in enumerate(steps, start=1):
                    current = current + _clamped_bilinear(step, x + current[0], y + current[1])
                    np.testing.assert_allclose(traj.values[t, y, x], current, atol=1e-9)

    def test_rejects_mismatched_steps(self):
        with pytest.raises(DeformError, match="shape"):
            compose_pairwise_chain([np.zeros((8, 8, 2)), np.zeros((8, 9, 2))])
