"""
Tests for core.optimizer: solver settings, one-level descent and the two
registration drivers.
"""
import numpy as np
import pytest
from loguru import logger

from core.cost import build_casorati, build_patch_layout
from core.deform import compose_to_first_frame, dense_displacement, zero_mesh
from core.evaluation import drift, end_systolic_frame, epe, vse
from core.imaging import CineSequence, build_pyramid, normalize_intensities, warp_sequence
from core.optimizer import (
    SolverConfig,
    SolverConfigError,
    SolveTrace,
    pgd_level,
    register_groupwise,
    register_pairwise,
)
from core.phantom import PhantomSpec, generate_phantom
from core.strain import compute_strain


def _texture(n=32, shift=0.0):
    ys, xs = np.mgrid[0:n, 0:n].astype(float)
    xs = xs - shift
    return np.sin(0.2 * xs) + 0.8 * np.cos(0.17 * ys) + 0.5 * np.sin(0.12 * xs + 0.1 * ys)


@pytest.fixture(scope="module")
def small_phantom():
    spec = PhantomSpec(width=32, height=32, frames=8, inner_radius=5.0, outer_radius=9.0, taper=4.0)
    seq, _ = generate_phantom(spec)
    return seq


@pytest.fixture(scope="module")
def phantom_run(small_phantom):
    config = SolverConfig.from_coarsest(5, 3, levels=2, max_iterations=15, deterministic=True)
    return register_groupwise(small_phantom, config, metric="llr")


class TestSolverConfig:
    def test_default_schedule(self):
        assert SolverConfig().patch_schedule() == [(5, 3), (10, 6), (20, 12)]

    def test_from_coarsest_matches_defaults(self):
        config = SolverConfig.from_coarsest(5, 3, levels=3)

        assert (config.patch_size, config.patch_spacing) == (20, 12)

    def test_schedule_floors_small_patches(self):
        config = SolverConfig(levels=3, patch_size=4, patch_spacing=2)

        assert config.patch_schedule()[0] == (2, 1)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"levels": 0},
            {"tolerance": 0.0},
            {"backtrack_factor": 1.0},
            {"min_step": 2.0, "initial_step": 1.0},
            {"spatial_weight": -1.0},
            {"patch_size": 10, "patch_spacing": 11},
            {"max_iterations": 0},
        ],
    )
    def test_rejects_invalid_settings(self, kwargs):
        with pytest.raises(SolverConfigError):
            SolverConfig(**kwargs)

    def test_deterministic_forces_one_worker(self):
        assert SolverConfig(workers=4, deterministic=True).effective_workers == 1
        assert SolverConfig(workers=4).effective_workers == 4


class TestSolveTrace:
    def test_extend_merges_everything(self):
        first = SolveTrace(wall_time=1.0, terminations={"0": "converged"})
        second = SolveTrace(wall_time=2.5, terminations={"1": "max_iterations"})

        first.extend(second)

        assert first.wall_time == pytest.approx(3.5)
        assert first.terminations == {"0": "converged", "1": "max_iterations"}


class TestPgdLevel:
    def test_rejects_initial_mesh_off_the_constraint(self, small_phantom):
        mesh = zero_mesh(small_phantom.grid, small_phantom.frames, 6)
        mesh = mesh.with_values(np.full(mesh.values.shape, 0.1))
        config = SolverConfig(levels=1, patch_size=5, patch_spacing=3)

        with pytest.raises(SolverConfigError, match="zero-mean"):
            pgd_level(small_phantom, mesh, config.cost_params("llr", 0), config)

    def test_costs_never_increase(self, small_phantom):
        config = SolverConfig(levels=1, patch_size=5, patch_spacing=3, max_iterations=10)
        mesh = zero_mesh(small_phantom.grid, small_phantom.frames, 6)

        result, trace = pgd_level(small_phantom, mesh, config.cost_params("variance", 0), config)

        costs = trace.level_costs(0)
        assert all(b <= a for a, b in zip(costs, costs[1:]))
        assert np.abs(result.values.mean(axis=0)).max() <= 1e-10
        assert trace.terminations["0"] in {"zero_gradient", "step_underflow", "converged", "max_iterations"}


class TestRegisterGroupwise:
    def test_static_sequence_barely_moves(self):
        frame = _texture()
        seq = CineSequence(np.stack([frame] * 4))
        config = SolverConfig.from_coarsest(5, 3, levels=2, max_iterations=20, deterministic=True)

        disp, _, _ = register_groupwise(seq, config, metric="llr")

        assert np.abs(disp).max() <= 0.05

    def test_two_frames_need_the_temporal_term_off(self, small_phantom):
        pair = small_phantom.with_data(small_phantom.data[:2])
        config = SolverConfig(levels=1, patch_size=5, patch_spacing=3, max_iterations=3)

        with pytest.raises(SolverConfigError, match="glr .*at least 3 frames"):
            register_groupwise(pair, config, metric="glr")

        no_temporal = SolverConfig(levels=1, patch_size=5, patch_spacing=3, max_iterations=3, temporal_weight=0.0)
        disp, _, _ = register_groupwise(pair, no_temporal, metric="glr")
        assert disp.shape == (2, 32, 32, 2)

    def test_logs_the_seed(self, small_phantom):
        messages = []
        sink = logger.add(messages.append, format="{message}")
        try:
            config = SolverConfig(levels=1, patch_size=5, patch_spacing=3, max_iterations=2, seed=11)
            register_groupwise(small_phantom.with_data(small_phantom.data[:3]), config)
        finally:
            logger.remove(sink)

        assert any("seed 11" in message for message in messages)

    def test_phantom_costs_decrease_per_level(self, phantom_run):
        _, _, trace = phantom_run

        for level in (0, 1):
            costs = trace.level_costs(level)
            assert costs[-1] <= costs[0]
            assert all(b <= a for a, b in zip(costs, costs[1:]))

    def test_mesh_stays_zero_mean(self, phantom_run):
        disp, mesh, _ = phantom_run

        assert np.abs(mesh.values.mean(axis=0)).max() <= 1e-10
        assert disp.shape == (8, 32, 32, 2)

    def test_every_level_reports_a_termination(self, phantom_run):
        assert set(phantom_run[2].terminations) == {"0", "1"}

    def test_deterministic_runs_are_identical(self, small_phantom, phantom_run):
        config = SolverConfig.from_coarsest(5, 3, levels=2, max_iterations=15, deterministic=True)

        disp, _, _ = register_groupwise(small_phantom, config, metric="llr")

        assert np.array_equal(disp, phantom_run[0])


class TestRegisterPairwise:
    def test_recovers_a_translation(self):
        seq = CineSequence(np.stack([_texture(), _texture(shift=2.0)]))
        config = SolverConfig(levels=2, patch_size=10, patch_spacing=6, max_iterations=100)

        steps, traj, trace = register_pairwise(seq, config)

        interior = steps[0][6:-6, 6:-6]
        assert interior[..., 0].mean() == pytest.approx(2.0, abs=0.2)
        assert interior[..., 1].mean() == pytest.approx(0.0, abs=0.2)
        assert not traj.values[0].any()
        assert set(trace.terminations) == {"2:0", "2:1"}

    def test_chains_every_pair(self, small_phantom):
        seq = small_phantom.with_data(small_phantom.data[:3])
        config = SolverConfig(levels=1, patch_size=5, patch_spacing=3, max_iterations=5)

        steps, traj, trace = register_pairwise(seq, config)

        assert len(steps) == 2
        assert traj.frames == 3
        assert {"2:0", "3:0"} <= set(trace.terminations)


def _rank_excess(seq, layout):
    """Sum over patches of the singular values beyond the leading one."""
    total = 0.0
    for x, y in layout.origins:
        region = np.zeros((seq.height, seq.width), dtype=bool)
        region[y - 1:y - 1 + layout.size, x - 1:x - 1 + layout.size] = True
        s = np.linalg.svd(build_casorati(seq, region), compute_uv=False)
        total += float(s.sum() - s[0])
    return total


@pytest.fixture(scope="module")
def default_phantom():
    seq, motion = generate_phantom(PhantomSpec())
    return normalize_intensities(seq), motion


@pytest.fixture(scope="module")
def phantom_comparison(default_phantom):
    """One deterministic run per method on the default phantom."""
    seq, motion = default_phantom
    config = SolverConfig(deterministic=True)
    runs = {}
    for metric in ("llr", "variance"):
        disp, _, _ = register_groupwise(seq, config, metric=metric)
        runs[metric] = compose_to_first_frame(disp)
    _, runs["pairwise"], _ = register_pairwise(seq, config)

    strain = {name: compute_strain(traj, motion.mask) for name, traj in runs.items()}
    truth = compute_strain(motion.trajectory, motion.mask)
    return runs, strain, truth


@pytest.mark.slow
class TestPhantomComparison:
    def test_llr_tracks_best(self, default_phantom, phantom_comparison):
        _, motion = default_phantom
        runs, _, _ = phantom_comparison
        mask = motion.mask.mask

        errors = {name: epe(traj, motion.trajectory, mask) for name, traj in runs.items()}

        assert errors["llr"] <= 0.5
        assert errors["llr"] <= errors["pairwise"]
        assert errors["llr"] <= errors["variance"]

    def test_llr_peak_strain_matches_the_analytic_curves(self, default_phantom, phantom_comparison):
        _, motion = default_phantom
        _, strain, _ = phantom_comparison
        analytic = motion.global_truth()
        es = end_systolic_frame(analytic["GCS"])

        estimated = strain["llr"].global_values
        assert 100.0 * abs(estimated["GRS"][es - 1] - analytic["GRS"][es - 1]) <= 3.0
        assert 100.0 * abs(estimated["GCS"][es - 1] - analytic["GCS"][es - 1]) <= 2.0

    def test_llr_voxel_strain_beats_pairwise(self, default_phantom, phantom_comparison):
        _, motion = default_phantom
        _, strain, truth = phantom_comparison
        es = end_systolic_frame(motion.global_truth()["GCS"])
        mask = motion.mask.mask

        for direction in ("radial", "circumferential"):
            llr = vse(strain["llr"].maps[direction], truth.maps[direction], mask, es)
            pairwise = vse(strain["pairwise"].maps[direction], truth.maps[direction], mask, es)
            assert llr <= pairwise

    def test_groupwise_strain_returns_to_zero(self, phantom_comparison):
        _, strain, _ = phantom_comparison
        llr, pairwise = strain["llr"].global_values, strain["pairwise"].global_values

        assert drift(llr["GRS"]) <= 1.0
        assert drift(llr["GRS"]) < drift(pairwise["GRS"])
        assert abs(pairwise["GRS"][-1]) > abs(llr["GRS"][-1])

    def test_coarsest_level_removes_most_of_the_excess_rank(self):
        seq, _ = generate_phantom(PhantomSpec(noise=0.0))
        config = SolverConfig(deterministic=True)
        coarse = build_pyramid(normalize_intensities(seq), config.levels)[0]
        params = config.cost_params("llr", 0)
        layout = build_patch_layout(coarse.grid, params.patch_size, params.patch_spacing)

        mesh, trace = pgd_level(coarse, zero_mesh(coarse.grid, coarse.frames, config.control_spacing), params, config)

        costs = trace.level_costs(0)
        assert costs[-1] < costs[0]
        before = _rank_excess(coarse, layout)
        after = _rank_excess(warp_sequence(coarse, dense_displacement(mesh)), layout)
        assert after <= 0.7 * before
