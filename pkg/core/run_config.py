"""
Run configuration: built-in defaults, a named preset, an optional JSON file
and command-line flags, merged in that order of increasing precedence.
"""
import json
from argparse import Namespace
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from loguru import logger

from config.settings import (
    COARSEST_PATCH_SIZE,
    COARSEST_PATCH_SPACING,
    DEFAULT_PRESET,
    DEFAULT_REFERENCE_ANGLE,
    DEFAULT_SEED,
    DEFAULT_SEGMENTS,
    INITIAL_STEP,
    MAX_ITERATIONS_PER_LEVEL,
    METRICS,
    MIN_STEP,
    BACKTRACK_FACTOR,
    PRESETS,
    PYRAMID_LEVELS,
    RELATIVE_TOLERANCE,
    SEGMENT_CHOICES,
    WORKERS,
)
from core.optimizer import SolverConfig


class ConfigError(ValueError):
    """Unknown keys, unreadable config files or out-of-range settings."""


@dataclass
class RunConfig:
    metric: str = "llr"
    preset: str = DEFAULT_PRESET
    levels: int = PYRAMID_LEVELS
    patch_size: int = COARSEST_PATCH_SIZE          # coarsest level
    patch_spacing: int = COARSEST_PATCH_SPACING    # coarsest level
    control_spacing: int = PRESETS[DEFAULT_PRESET]["control_spacing"]
    spatial_weight: float = PRESETS[DEFAULT_PRESET]["spatial_weight"]
    temporal_weight: float = PRESETS[DEFAULT_PRESET]["temporal_weight"]
    tolerance: float = RELATIVE_TOLERANCE
    max_iterations: int = MAX_ITERATIONS_PER_LEVEL
    initial_step: float = INITIAL_STEP
    backtrack_factor: float = BACKTRACK_FACTOR
    min_step: float = MIN_STEP
    deterministic: bool = False
    seed: int = DEFAULT_SEED
    workers: int = WORKERS
    normalize: bool = True
    pixel_spacing: Optional[float] = None
    input: Optional[str] = None
    output: Optional[str] = None
    mask: Optional[str] = None
    contours: List[List[str]] = field(default_factory=list)  # [name, tracked, reference]
    segments: int = DEFAULT_SEGMENTS
    reference_angle: float = DEFAULT_REFERENCE_ANGLE

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got '{self.metric}'")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got '{self.preset}'")
        if self.segments not in SEGMENT_CHOICES:
            raise ConfigError(f"segments must be one of {SEGMENT_CHOICES}, got {self.segments}")
        if self.pixel_spacing is not None and not self.pixel_spacing > 0:
            raise ConfigError(f"pixel spacing must be positive, got {self.pixel_spacing}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        for entry in self.contours:
            if len(entry) != 3:
                raise ConfigError(f"each contour entry needs [name, tracked, reference], got {entry}")

    def solver_config(self) -> SolverConfig:
        try:
            return SolverConfig.from_coarsest(
                self.patch_size,
                self.patch_spacing,
                levels=self.levels,
                control_spacing=self.control_spacing,
                spatial_weight=self.spatial_weight,
                temporal_weight=self.temporal_weight,
                tolerance=self.tolerance,
                max_iterations=self.max_iterations,
                initial_step=self.initial_step,
                backtrack_factor=self.backtrack_factor,
                min_step=self.min_step,
                deterministic=self.deterministic,
                seed=self.seed,
                workers=self.workers,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_FIELDS = {f.name for f in fields(RunConfig)}


def load_run_config(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a JSON object of RunConfig fields; unknown keys are rejected."""
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a JSON object at the top level")
    unknown = sorted(set(values) - _FIELDS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return values


def resolve_run_config(args: Namespace, file_values: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Merge defaults < preset < config file < CLI flags.

    Only CLI attributes that were actually given (not None) override; argparse
    defaults for overridable flags must therefore be None.
    """
    file_values = dict(file_values or {})
    cli = {k: v for k, v in vars(args).items() if k in _FIELDS and v is not None}

    preset = cli.get("preset") or file_values.get("preset") or DEFAULT_PRESET
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got '{preset}'")

    merged: Dict[str, Any] = {"preset": preset}
    merged.update(PRESETS[preset])
    merged.update(file_values)
    merged.update(cli)
    try:
        config = RunConfig(**merged)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    logger.debug(f"Resolved run config: {config.to_dict()}")
    return config
