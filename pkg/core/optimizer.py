"""
Projected gradient descent over the control mesh, run coarse to fine.

Groupwise registration keeps the mesh on the zero-temporal-mean subspace: the
constraint is linear, so projecting the gradient is the same as subtracting its
temporal mean. The pairwise baseline reuses the same descent without the
projection, one frame pair at a time, and chains the results.
"""
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from config.settings import (
    BACKTRACK_FACTOR,
    CONTROL_POINT_SPACING,
    COARSEST_PATCH_SIZE,
    COARSEST_PATCH_SPACING,
    DEFAULT_SEED,
    INITIAL_STEP,
    MAX_ITERATIONS_PER_LEVEL,
    MIN_STEP,
    PYRAMID_FACTOR,
    PYRAMID_LEVELS,
    RELATIVE_TOLERANCE,
    SPATIAL_WEIGHT,
    TEMPORAL_WEIGHT,
    WORKERS,
)
from core.cost import (
    CostParams,
    CostReport,
    layout_for_grid,
    sequence_slopes,
    ssd_pairwise,
    total_cost,
)
from core.deform import (
    ControlMesh,
    DisplacementField,
    TrajectoryField,
    compose_pairwise_chain,
    dense_displacement,
    project_zero_mean,
    prolong_mesh,
    zero_mesh,
)
from core.imaging import CineSequence, build_pyramid, cell_slopes, validate_full_resolution

# Below this the projected gradient is rounding noise, not a direction.
_GRADIENT_FLOOR = 1e-14


class SolverConfigError(ValueError):
    """Solver settings outside their valid ranges."""


class SolverError(ArithmeticError):
    """The objective went non-finite or a pairwise step could not be solved."""


@dataclass
class SolverConfig:
    """
    Patch size and spacing are finest-level values; each coarser level halves
    them, floored at 2 and 1. `from_coarsest` builds the same schedule from the
    lowest level upwards.
    """

    levels: int = PYRAMID_LEVELS
    patch_size: int = COARSEST_PATCH_SIZE * PYRAMID_FACTOR ** (PYRAMID_LEVELS - 1)
    patch_spacing: int = COARSEST_PATCH_SPACING * PYRAMID_FACTOR ** (PYRAMID_LEVELS - 1)
    control_spacing: int = CONTROL_POINT_SPACING
    spatial_weight: float = SPATIAL_WEIGHT
    temporal_weight: float = TEMPORAL_WEIGHT
    tolerance: float = RELATIVE_TOLERANCE
    max_iterations: int = MAX_ITERATIONS_PER_LEVEL
    initial_step: float = INITIAL_STEP
    backtrack_factor: float = BACKTRACK_FACTOR
    min_step: float = MIN_STEP
    deterministic: bool = False
    seed: int = DEFAULT_SEED
    workers: int = WORKERS

    def __post_init__(self):
        if self.levels < 1:
            raise SolverConfigError(f"levels must be >= 1, got {self.levels}")
        if self.tolerance <= 0:
            raise SolverConfigError(f"tolerance must be positive, got {self.tolerance}")
        if self.control_spacing < 1:
            raise SolverConfigError(f"control spacing must be >= 1, got {self.control_spacing}")
        if self.spatial_weight < 0 or self.temporal_weight < 0:
            raise SolverConfigError("regularization weights must be nonnegative")
        if self.max_iterations < 1:
            raise SolverConfigError(f"max iterations must be >= 1, got {self.max_iterations}")
        if not 0 < self.backtrack_factor < 1:
            raise SolverConfigError(f"backtracking factor must lie in (0, 1), got {self.backtrack_factor}")
        if not 0 < self.min_step <= self.initial_step:
            raise SolverConfigError("need 0 < min step <= initial step")
        if self.patch_size < 2 or not 1 <= self.patch_spacing <= self.patch_size:
            raise SolverConfigError(
                f"invalid finest patch size/spacing {self.patch_size}/{self.patch_spacing}"
            )

    @classmethod
    def from_coarsest(cls, patch_size: int, patch_spacing: int, levels: int = PYRAMID_LEVELS, **kwargs) -> "SolverConfig":
        scale = PYRAMID_FACTOR ** (levels - 1)
        return cls(
            levels=levels,
            patch_size=patch_size * scale,
            patch_spacing=patch_spacing * scale,
            **kwargs,
        )

    def patch_schedule(self) -> List[Tuple[int, int]]:
        """(size, spacing) per level, coarse to fine."""
        schedule = []
        for level in range(self.levels):
            scale = PYRAMID_FACTOR ** (self.levels - 1 - level)
            size = max(2, self.patch_size // scale)
            spacing = min(size, max(1, self.patch_spacing // scale))
            schedule.append((size, spacing))
        return schedule

    @property
    def effective_workers(self) -> int:
        return 1 if self.deterministic else max(1, self.workers)

    def cost_params(self, kind: str, level: int) -> CostParams:
        size, spacing = self.patch_schedule()[level]
        return CostParams(
            kind=kind,
            spatial_weight=self.spatial_weight,
            temporal_weight=self.temporal_weight,
            patch_size=size,
            patch_spacing=spacing,
        )


@dataclass(frozen=True)
class IterationRecord:
    level: int
    iteration: int
    cost: float
    dissimilarity: float
    spatial: float
    temporal: float
    step: float
    grad_norm: float
    pair: Optional[int] = None


@dataclass
class SolveTrace:
    records: List[IterationRecord] = field(default_factory=list)
    wall_time: float = 0.0
    terminations: Dict[str, str] = field(default_factory=dict)

    def extend(self, other: "SolveTrace") -> None:
        self.records.extend(other.records)
        self.wall_time += other.wall_time
        self.terminations.update(other.terminations)

    def level_costs(self, level: int, pair: Optional[int] = None) -> List[float]:
        return [r.cost for r in self.records if r.level == level and r.pair == pair]


def _record(report: CostReport, level: int, iteration: int, step: float, grad_norm: float, pair=None) -> IterationRecord:
    return IterationRecord(
        level=level,
        iteration=iteration,
        cost=report.total,
        dissimilarity=report.dissimilarity,
        spatial=report.spatial,
        temporal=report.temporal,
        step=step,
        grad_norm=grad_norm,
        pair=pair,
    )


def _check_finite(report: CostReport, where: str) -> None:
    terms = {
        "dissimilarity": report.dissimilarity,
        "spatial regularizer": report.spatial,
        "temporal regularizer": report.temporal,
    }
    bad = [name for name, value in terms.items() if not np.isfinite(value)]
    if bad or not np.isfinite(report.gradient).all():
        raise SolverError(f"{where}: non-finite {', '.join(bad) or 'gradient'}")


def _descend(
    objective: Callable[[ControlMesh], CostReport],
    mesh: ControlMesh,
    config: SolverConfig,
    level: int,
    project: bool,
    pair: Optional[int] = None,
) -> Tuple[ControlMesh, SolveTrace]:
    """Normalized steepest descent with simple-decrease backtracking."""
    where = f"level {level}" + (f", pair {pair}" if pair is not None else "")
    started = time.perf_counter()
    report = objective(mesh)
    _check_finite(report, where)
    trace = SolveTrace(records=[_record(report, level, 0, 0.0, 0.0, pair)])
    step = config.initial_step
    reason = "max_iterations"

    for iteration in range(1, config.max_iterations + 1):
        direction = report.gradient
        if project:
            direction = direction - direction.mean(axis=0, keepdims=True)
        scale = float(np.abs(direction).max())
        if scale <= _GRADIENT_FLOOR * max(1.0, abs(report.total)):
            reason = "zero_gradient"
            break
        grad_norm = float(np.linalg.norm(direction))
        direction = direction / scale

        accepted = None
        while step >= config.min_step:
            trial = mesh.with_values(mesh.values - step * direction)
            if project:
                trial = project_zero_mean(trial)
            trial_report = objective(trial)
            _check_finite(trial_report, f"{where}, iteration {iteration}")
            if trial_report.total < report.total:
                accepted = (trial, trial_report)
                break
            step *= config.backtrack_factor
        if accepted is None:
            reason = "step_underflow"
            break

        previous = report.total
        mesh, report = accepted
        trace.records.append(_record(report, level, iteration, step, grad_norm, pair))
        logger.debug(f"{where} iter {iteration}: cost {report.total:.6g} step {step:.3g}")
        if abs(report.total - previous) / max(abs(previous), 1e-30) < config.tolerance:
            reason = "converged"
            break
        step = min(step / config.backtrack_factor, config.initial_step)

    key = f"{level}" if pair is None else f"{pair}:{level}"
    trace.terminations[key] = reason
    trace.wall_time = time.perf_counter() - started
    return mesh, trace


def pgd_level(
    seq_level: CineSequence,
    mesh_init: ControlMesh,
    params: CostParams,
    config: SolverConfig,
    level: int = 0,
) -> Tuple[ControlMesh, SolveTrace]:
    """Groupwise descent on one pyramid level."""
    drift = float(np.abs(mesh_init.values.mean(axis=0)).max())
    if drift > 1e-10:
        raise SolverConfigError(f"initial mesh violates the zero-mean constraint by {drift:.3g}")
    slopes = sequence_slopes(seq_level)
    layout = None
    if params.kind == "llr":
        layout = layout_for_grid(seq_level.grid, params.patch_size, params.patch_spacing)
    workers = config.effective_workers

    def objective(mesh: ControlMesh) -> CostReport:
        return total_cost(mesh, seq_level, slopes, params, layout=layout, workers=workers)

    mesh, trace = _descend(objective, mesh_init, config, level, project=True)
    first, last = trace.records[0].cost, trace.records[-1].cost
    logger.info(
        f"Level {level} ({seq_level.width}x{seq_level.height}, {params.kind}): "
        f"cost {first:.6g} -> {last:.6g} in {len(trace.records) - 1} steps "
        f"[{trace.terminations[str(level)]}]"
    )
    return mesh, trace


def _better_start(candidate: ControlMesh, objective: Callable[[ControlMesh], CostReport], frames: int) -> ControlMesh:
    """Never start a level from something worse than no deformation at all."""
    zero = zero_mesh(candidate.grid, frames, candidate.spacing)
    if objective(zero).total < objective(candidate).total:
        logger.warning("Prolonged mesh is worse than the identity; restarting the level from zero")
        return zero
    return candidate


def register_groupwise(
    seq: CineSequence,
    config: SolverConfig,
    metric: str = "llr",
) -> Tuple[DisplacementField, ControlMesh, SolveTrace]:
    """Coarse-to-fine groupwise registration starting from the zero mesh."""
    validate_full_resolution(seq)
    if config.temporal_weight > 0 and seq.frames < 3:
        raise SolverConfigError(
            f"groupwise {metric} with temporal weight {config.temporal_weight:g} needs at least 3 frames, "
            f"got {seq.frames}; set the temporal weight to 0 for shorter sequences"
        )
    logger.info(
        f"Groupwise {metric}: {seq.frames} frames, {config.levels} levels, "
        f"seed {config.seed}, deterministic={config.deterministic}"
    )
    pyramid = build_pyramid(seq, config.levels)
    trace = SolveTrace()
    mesh = zero_mesh(pyramid[0].grid, seq.frames, config.control_spacing)

    for level, level_seq in enumerate(pyramid):
        params = config.cost_params(metric, level)
        if level > 0:
            mesh = prolong_mesh(mesh, level_seq.grid, config.control_spacing)
            slopes = sequence_slopes(level_seq)
            mesh = _better_start(
                mesh,
                lambda m: total_cost(m, level_seq, slopes, params, workers=config.effective_workers),
                seq.frames,
            )
        mesh, segment = pgd_level(level_seq, mesh, params, config, level=level)
        trace.extend(segment)

    logger.info(f"Groupwise {metric} registration finished in {trace.wall_time:.1f}s")
    return dense_displacement(mesh), mesh, trace


def _register_pair(
    pair_seq: CineSequence, config: SolverConfig, pair: int
) -> Tuple[np.ndarray, SolveTrace]:
    """Multi-resolution FFD/SSD of frame 2 onto frame 1 of a two-frame sequence."""
    pyramid = build_pyramid(pair_seq, config.levels)
    trace = SolveTrace()
    mesh = zero_mesh(pyramid[0].grid, 1, config.control_spacing)
    for level, level_seq in enumerate(pyramid):
        if level > 0:
            mesh = prolong_mesh(mesh, level_seq.grid, config.control_spacing, zero_mean=False)
        fixed, moving = level_seq.data[0], level_seq.data[1]
        slopes = cell_slopes(moving)

        def objective(m: ControlMesh, fixed=fixed, moving=moving, slopes=slopes) -> CostReport:
            return ssd_pairwise(fixed, moving, m, config.spatial_weight, slopes)

        if level > 0:
            mesh = _better_start(mesh, objective, 1)
        mesh, segment = _descend(objective, mesh, config, level, project=False, pair=pair)
        trace.extend(segment)
    return dense_displacement(mesh)[0], trace


def register_pairwise(
    seq: CineSequence, config: SolverConfig
) -> Tuple[List[np.ndarray], TrajectoryField, SolveTrace]:
    """Sequential frame-to-frame registration chained back to frame 1."""
    validate_full_resolution(seq)
    logger.info(f"Pairwise: {seq.frames - 1} pairs, seed {config.seed}, deterministic={config.deterministic}")
    trace = SolveTrace()
    steps: List[np.ndarray] = []
    for t in range(2, seq.frames + 1):
        pair_seq = seq.with_data(seq.data[[t - 2, t - 1]])
        try:
            step, segment = _register_pair(pair_seq, config, pair=t)
        except ArithmeticError as e:
            raise SolverError(f"pairwise registration of frame {t} onto {t - 1} failed: {e}") from e
        steps.append(step)
        trace.extend(segment)
        logger.debug(f"Pair {t - 1}->{t}: max |d| {np.abs(step).max():.3f} px")

    logger.info(f"Pairwise registration of {seq.frames - 1} pairs finished in {trace.wall_time:.1f}s")
    return steps, compose_pairwise_chain(steps), trace
