"""
Tests for core.cost: patch layouts, nuclear norms, the three dissimilarities,
both regularizers and the assembled objectives with their mesh gradients.
"""
import numpy as np
import pytest

from core.cost import (
    CostError,
    CostParams,
    build_casorati,
    build_patch_layout,
    dissimilarity,
    layout_for_grid,
    local_rank_map,
    nuclear_norm,
    relative_reduction,
    sequence_slopes,
    spatial_regularizer,
    ssd_pairwise,
    temporal_regularizer,
    total_cost,
)
from core.deform import project_zero_mean, zero_mesh
from core.imaging import CineSequence
from core.phantom import PhantomSpec, generate_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.fixture(scope="module")
def small_phantom():
    spec = PhantomSpec(width=32, height=32, frames=8, inner_radius=5.0, outer_radius=9.0, taper=4.0)
    seq, _ = generate_phantom(spec)
    return seq


def _directional_check(objective, mesh, rng, directions=20, h=1e-5):
    """Worst relative error between <grad, v> and central differences along v."""
    report = objective(mesh)
    worst = 0.0
    for _ in range(directions):
        v = rng.normal(size=mesh.values.shape)
        analytic = float(np.sum(report.gradient * v))
        plus = objective(mesh.with_values(mesh.values + h * v)).total
        minus = objective(mesh.with_values(mesh.values - h * v)).total
        numeric = (plus - minus) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst


class TestPatchLayout:
    def test_sixteen_pixels_patch_five_spacing_three(self):
        layout = build_patch_layout((16, 16), 5, 3)

        assert layout.origins_x == (1, 4, 7, 10, 12)
        assert layout.count == 25

    def test_anchor_is_deduplicated(self):
        layout = build_patch_layout((9, 9), 5, 3)

        assert layout.origins_x == (1, 4, 5)
        assert layout.count == 9

    def test_full_grid_patch_is_a_single_patch(self):
        assert build_patch_layout((12, 12), 12, 5).count == 1

    def test_every_pixel_is_covered(self):
        layout = build_patch_layout((23, 17), 6, 4)
        covered = np.zeros((17, 23), dtype=bool)
        for x, y in layout.origins:
            covered[y - 1 : y + 5, x - 1 : x + 5] = True

        assert covered.all()

    def test_rejects_oversized_patch(self):
        with pytest.raises(CostError, match="does not fit"):
            build_patch_layout((8, 8), 9, 3)

    def test_layout_for_grid_clips_oversized_patch(self):
        layout = layout_for_grid((8, 10), 20, 12)

        assert layout.size == 8
        assert layout.count == 1 * len(layout.origins_y)


class TestCasorati:
    def test_single_voxel_is_its_time_series(self, rng):
        seq = CineSequence(rng.random((5, 8, 8)))
        region = np.zeros((8, 8), dtype=bool)
        region[2, 6] = True

        np.testing.assert_array_equal(build_casorati(seq, region), seq.data[:, 2, 6][None, :])

    def test_constant_sequence_is_rank_one(self, rng):
        frame = rng.random((8, 8))
        seq = CineSequence(np.stack([frame] * 4))

        assert np.linalg.matrix_rank(build_casorati(seq, np.ones((8, 8), dtype=bool))) == 1

    def test_full_grid_rows(self, rng):
        seq = CineSequence(rng.random((3, 8, 10)))

        assert build_casorati(seq, np.ones((8, 10), dtype=bool)).shape == (80, 3)

    def test_rejects_empty_region(self):
        with pytest.raises(CostError, match="empty"):
            build_casorati(CineSequence(np.zeros((2, 8, 8))), np.zeros((8, 8), dtype=bool))


class TestNuclearNorm:
    def test_identity(self):
        assert nuclear_norm(np.eye(2))[0] == pytest.approx(2.0)

    def test_diagonal(self):
        assert nuclear_norm(np.diag([3.0, 4.0]))[0] == pytest.approx(7.0)

    def test_rank_one(self):
        assert nuclear_norm(np.array([[1.0, 2.0], [2.0, 4.0]]))[0] == pytest.approx(5.0)

    def test_permutation_invariant(self, rng):
        matrix = rng.normal(size=(12, 5))

        permuted = matrix[rng.permutation(12)][:, rng.permutation(5)]

        assert nuclear_norm(permuted)[0] == pytest.approx(nuclear_norm(matrix)[0], rel=1e-9)

    def test_subgradient_is_u_v_transpose(self, rng):
        matrix = rng.normal(size=(6, 4))
        u, _, vt = np.linalg.svd(matrix, full_matrices=False)

        np.testing.assert_allclose(nuclear_norm(matrix)[1], u @ vt, atol=1e-12)


class TestDissimilarity:
    def test_llr_of_temporally_constant_sequence(self, rng):
        frame = rng.random((16, 16))
        seq = CineSequence(np.stack([frame] * 4))
        layout = build_patch_layout((16, 16), 5, 3)

        value, _ = dissimilarity(seq, layout, "llr")

        expected = sum(
            np.linalg.norm(frame[y - 1 : y + 4, x - 1 : x + 4]) * 2.0 for x, y in layout.origins
        )
        assert value == pytest.approx(expected, rel=1e-12)

    def test_variance_of_constant_sequence_is_zero(self, rng):
        seq = CineSequence(np.stack([rng.random((8, 8))] * 3))

        assert dissimilarity(seq, None, "variance")[0] == pytest.approx(0.0, abs=1e-28)

    def test_variance_ignores_intensity_offset(self, rng):
        seq = CineSequence(rng.random((4, 8, 8)))

        base = dissimilarity(seq, None, "variance")[0]
        shifted = dissimilarity(seq.with_data(seq.data + 3.0), None, "variance")[0]

        assert shifted == pytest.approx(base, rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_single_full_grid_patch_equals_glr(self, seed):
        seq = CineSequence(np.random.default_rng(seed).random((4, 16, 16)))
        layout = build_patch_layout((16, 16), 16, 16)

        llr, llr_grad = dissimilarity(seq, layout, "llr")
        glr, glr_grad = dissimilarity(seq, None, "glr")

        assert llr == pytest.approx(glr, rel=1e-9)
        np.testing.assert_allclose(llr_grad, glr_grad, atol=1e-12)

    def test_variance_gradient_matches_finite_differences(self, rng):
        seq = CineSequence(rng.random((4, 8, 8)))
        _, grad = dissimilarity(seq, None, "variance")
        v = rng.normal(size=seq.data.shape)
        h = 1e-6

        plus = dissimilarity(seq.with_data(seq.data + h * v), None, "variance")[0]
        minus = dissimilarity(seq.with_data(seq.data - h * v), None, "variance")[0]

        assert np.sum(grad * v) == pytest.approx((plus - minus) / (2 * h), rel=1e-6)

    def test_nonnegative(self, rng):
        seq = CineSequence(rng.random((4, 12, 12)))
        layout = build_patch_layout((12, 12), 5, 3)

        for kind in ("llr", "glr", "variance"):
            assert dissimilarity(seq, layout, kind)[0] >= 0.0

    def test_workers_do_not_change_the_result(self, rng):
        seq = CineSequence(rng.random((5, 20, 20)))
        layout = build_patch_layout((20, 20), 5, 3)

        serial = dissimilarity(seq, layout, "llr", workers=1)
        threaded = dissimilarity(seq, layout, "llr", workers=3)

        assert threaded[0] == pytest.approx(serial[0], rel=1e-12)
        np.testing.assert_allclose(threaded[1], serial[1], atol=1e-12)

    def test_llr_needs_layout(self, rng):
        with pytest.raises(CostError, match="layout"):
            dissimilarity(CineSequence(rng.random((3, 8, 8))), None, "llr")

    def test_unknown_kind(self, rng):
        with pytest.raises(CostError, match="unknown"):
            dissimilarity(CineSequence(rng.random((3, 8, 8))), None, "ncc")


class TestLocalRankMap:
    def test_constant_sequence_map(self):
        seq = CineSequence(np.ones((4, 10, 10)))
        layout = build_patch_layout((10, 10), 5, 5)

        rank_map = local_rank_map(seq, layout)

        # every 5x5 patch of ones has nuclear norm 5 * 2
        np.testing.assert_allclose(rank_map, 10.0)

    def test_relative_reduction(self):
        before = np.array([[2.0, 0.0], [4.0, 1.0]])
        after = np.array([[1.0, 0.0], [4.0, 0.25]])

        np.testing.assert_allclose(relative_reduction(before, after), [[0.5, 0.0], [0.0, 0.75]])


class TestSpatialRegularizer:
    def test_affine_field_has_no_bending(self):
        ys, xs = np.mgrid[0:10, 0:12].astype(float)
        field = np.stack([0.3 * xs - 0.1 * ys + 2.0, 0.05 * xs + 0.2 * ys], axis=-1)[None]

        value, _ = spatial_regularizer(field)

        assert value <= 1e-20

    def test_quadratic_field(self):
        ys, xs = np.mgrid[0:9, 0:11].astype(float)
        field = np.stack([xs ** 2, np.zeros_like(xs)], axis=-1)[None]

        value, _ = spatial_regularizer(field)

        # T_xx = 2 wherever the x stencil fits: 9 rows x 9 columns
        assert value == pytest.approx(4.0 * 9 * 9)

    def test_gradient_matches_finite_differences(self, rng):
        field = rng.normal(size=(2, 9, 10, 2))
        _, grad = spatial_regularizer(field)
        v = rng.normal(size=field.shape)
        h = 1e-6

        numeric = (spatial_regularizer(field + h * v)[0] - spatial_regularizer(field - h * v)[0]) / (2 * h)

        assert np.sum(grad * v) == pytest.approx(numeric, rel=1e-6)

    def test_rejects_tiny_grid(self):
        with pytest.raises(CostError, match="3x3"):
            spatial_regularizer(np.zeros((1, 2, 5, 2)))


class TestTemporalRegularizer:
    def test_constant_in_time(self, rng):
        field = np.broadcast_to(rng.normal(size=(6, 6, 2)), (5, 6, 6, 2))

        assert temporal_regularizer(field)[0] == 0.0

    def test_linear_in_time_matches_loop(self):
        n_t, c = 6, np.array([0.5, -1.0])
        field = np.stack([np.broadcast_to(c * t, (4, 4, 2)) for t in range(n_t)])

        value, _ = temporal_regularizer(field)

        expected = 0.0
        for t in range(n_t):
            residual = field[(t + 1) % n_t] - 2 * field[t] + field[(t - 1) % n_t]
            expected += float((residual ** 2).sum())
        assert value == pytest.approx(expected)
        assert value > 0.0

    def test_cyclic_shift_invariance(self, rng):
        field = rng.normal(size=(7, 5, 5, 2))

        shifted = np.roll(field, 3, axis=0)

        assert temporal_regularizer(shifted)[0] == pytest.approx(temporal_regularizer(field)[0], rel=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        field = rng.normal(size=(5, 4, 4, 2))
        _, grad = temporal_regularizer(field)
        v = rng.normal(size=field.shape)
        h = 1e-6

        numeric = (temporal_regularizer(field + h * v)[0] - temporal_regularizer(field - h * v)[0]) / (2 * h)

        assert np.sum(grad * v) == pytest.approx(numeric, rel=1e-6)

    def test_needs_three_frames(self):
        with pytest.raises(CostError, match="3 frames"):
            temporal_regularizer(np.zeros((2, 4, 4, 2)))


class TestTotalCost:
    def test_unweighted_total_is_the_dissimilarity(self, small_phantom):
        mesh = zero_mesh(small_phantom.grid, small_phantom.frames, 6)
        params = CostParams(kind="llr", patch_size=5, patch_spacing=3)

        report = total_cost(mesh, small_phantom, sequence_slopes(small_phantom), params)

        assert report.total == report.dissimilarity
        assert report.spatial == 0.0 and report.temporal == 0.0

    def test_total_is_the_weighted_sum(self, small_phantom, rng):
        mesh = zero_mesh(small_phantom.grid, small_phantom.frames, 6)
        mesh = project_zero_mean(mesh.with_values(0.5 * rng.normal(size=mesh.values.shape)))
        params = CostParams(kind="llr", spatial_weight=6e-4, temporal_weight=0.06)

        report = total_cost(mesh, small_phantom, sequence_slopes(small_phantom), params)

        expected = report.dissimilarity + 6e-4 * report.spatial + 0.06 * report.temporal
        assert report.total == pytest.approx(expected, rel=1e-9)
        assert report.gradient.shape == mesh.values.shape

    @pytest.mark.parametrize("kind", ["llr", "glr", "variance"])
    def test_mesh_gradient_matches_finite_differences(self, small_phantom, rng, kind):
        mesh = zero_mesh(small_phantom.grid, small_phantom.frames, 6)
        mesh = project_zero_mean(mesh.with_values(0.4 * rng.normal(size=mesh.values.shape)))
        slopes = sequence_slopes(small_phantom)
        params = CostParams(kind=kind, spatial_weight=6e-4, temporal_weight=0.06)

        def objective(m):
            return total_cost(m, small_phantom, slopes, params)

        assert _directional_check(objective, mesh, rng) <= 1e-3

    def test_rejects_mismatched_mesh(self, small_phantom):
        with pytest.raises(CostError, match="mesh serves"):
            total_cost(
                zero_mesh((16, 16), small_phantom.frames, 6),
                small_phantom,
                sequence_slopes(small_phantom),
                CostParams(),
            )


class TestSsdPairwise:
    @staticmethod
    def _smooth(n=16, shift=0.0):
        ys, xs = np.mgrid[0:n, 0:n].astype(float)
        return np.sin(0.4 * (xs - shift)) + np.cos(0.3 * ys) + 0.1 * (xs - shift) * ys / n

    def test_identical_frames(self):
        frame = self._smooth()

        report = ssd_pairwise(frame, frame, zero_mesh((16, 16), 1, 4))

        assert report.total == 0.0

    def test_translation_is_undone(self):
        frame_a, frame_b = self._smooth(), self._smooth(shift=1.0)
        mesh = zero_mesh((16, 16), 1, 4)
        mesh = mesh.with_values(np.broadcast_to([1.0, 0.0], mesh.values.shape).copy())

        report = ssd_pairwise(frame_a, frame_b, mesh)

        # only the clamped last column is left over
        border = float(((frame_b[:, -1] - frame_a[:, -1]) ** 2).sum())
        assert report.total == pytest.approx(border, abs=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        frame_a, frame_b = self._smooth(), self._smooth(shift=0.6)
        mesh = zero_mesh((16, 16), 1, 4)
        mesh = mesh.with_values(0.3 * rng.normal(size=mesh.values.shape))

        def objective(m):
            return ssd_pairwise(frame_a, frame_b, m, spatial_weight=1e-3)

        assert _directional_check(objective, mesh, rng) <= 1e-3

    def test_rejects_mismatched_frames(self):
        with pytest.raises(CostError, match="differ"):
            ssd_pairwise(np.zeros((8, 8)), np.zeros((8, 9)), zero_mesh((8, 8), 1, 4))
