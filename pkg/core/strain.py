"""
Green-Lagrange strain from first-frame trajectories, and its reduction to
radial, circumferential and longitudinal curves.

Everything is Lagrangian: tensors, directions and masks live on the frame-1
(end-diastolic) grid. Strain is dimensionless here; percent belongs to the
file and report layer.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from loguru import logger
from scipy.ndimage import binary_erosion

from config.settings import (
    DEFAULT_REFERENCE_ANGLE,
    SEGMENT_CHOICES,
    STRAIN_EROSION_PX,
)
from core.deform import TrajectoryField


class StrainError(ValueError):
    """Empty masks, tiny grids or invalid segment requests."""


@dataclass(frozen=True)
class MyoMask:
    """Myocardium on the frame-1 grid, (N_y, N_x) booleans."""

    mask: np.ndarray
    reference_angle: float = DEFAULT_REFERENCE_ANGLE

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", mask)
        if mask.ndim != 2:
            raise StrainError(f"mask must be 2D, got shape {mask.shape}")
        if not mask.any():
            raise StrainError("myocardial mask is empty")

    @property
    def centroid(self) -> Tuple[float, float]:
        """1-based (x, y) mean of the mask pixels."""
        ys, xs = np.nonzero(self.mask)
        return float(xs.mean() + 1.0), float(ys.mean() + 1.0)

    @property
    def grid(self) -> Tuple[int, int]:
        return self.mask.shape[1], self.mask.shape[0]


@dataclass(frozen=True)
class DirectionField:
    """Unit radial and circumferential vectors, (N_y, N_x, 2) each."""

    radial: np.ndarray
    circumferential: np.ndarray
    valid: np.ndarray


@dataclass
class StrainField:
    """Tensors, directional maps and per-frame global values of one run."""

    tensors: np.ndarray
    maps: Dict[str, np.ndarray] = field(default_factory=dict)
    global_values: Dict[str, np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------

def _deformation_gradient(traj: TrajectoryField) -> np.ndarray:
    """F = I + grad u, shaped (N_t, N_y, N_x, 2, 2) with F[..., a, b] = dT_a / dx_b."""
    values = traj.values
    if values.shape[1] < 3 or values.shape[2] < 3:
        raise StrainError(f"strain needs a grid of at least 3x3, got {traj.grid}")
    jac = np.empty(values.shape[:3] + (2, 2))
    for a in range(2):
        d_dy, d_dx = np.gradient(values[..., a], axis=(1, 2))
        jac[..., a, 0] = d_dx
        jac[..., a, 1] = d_dy
    jac[..., 0, 0] += 1.0
    jac[..., 1, 1] += 1.0
    return jac


def green_lagrange(traj: TrajectoryField) -> np.ndarray:
    """E = (F^T F - I) / 2, symmetric by construction."""
    f = _deformation_gradient(traj)
    tensors = np.empty_like(f)
    for a in range(2):
        for b in range(a, 2):
            c = f[..., 0, a] * f[..., 0, b] + f[..., 1, a] * f[..., 1, b]
            value = 0.5 * (c - (1.0 if a == b else 0.0))
            tensors[..., a, b] = value
            tensors[..., b, a] = value
    return tensors


def jacobian_determinant(traj: TrajectoryField) -> np.ndarray:
    """det(F) per pixel and frame; values <= 0 mean the mapping folded."""
    f = _deformation_gradient(traj)
    return f[..., 0, 0] * f[..., 1, 1] - f[..., 0, 1] * f[..., 1, 0]


# ---------------------------------------------------------------------------
# Directions
# ---------------------------------------------------------------------------

def direction_field(myo: MyoMask) -> DirectionField:
    """Radial points away from the mask centroid; circumferential is radial turned +90 degrees."""
    n_y, n_x = myo.mask.shape
    cx, cy = myo.centroid
    xs, ys = np.meshgrid(np.arange(1, n_x + 1, dtype=np.float64), np.arange(1, n_y + 1, dtype=np.float64))
    offset = np.stack([xs - cx, ys - cy], axis=-1)
    radius = np.linalg.norm(offset, axis=-1)
    at_centre = radius < 1e-9
    valid = myo.mask & ~at_centre
    if (myo.mask & at_centre).any():
        logger.warning("Mask contains its own centroid pixel; it has no direction and is excluded")
    radial = offset / np.where(at_centre, 1.0, radius)[..., None]
    radial[at_centre] = 0.0
    circumferential = np.stack([-radial[..., 1], radial[..., 0]], axis=-1)
    return DirectionField(radial=radial, circumferential=circumferential, valid=valid)


def constant_direction_field(myo: MyoMask, direction: Tuple[float, float]) -> np.ndarray:
    """A user-supplied unit vector everywhere, for long-axis slices."""
    u = np.asarray(direction, dtype=np.float64)
    norm = float(np.linalg.norm(u))
    if u.shape != (2,) or norm == 0:
        raise StrainError(f"long-axis direction must be a nonzero 2-vector, got {direction}")
    return np.broadcast_to(u / norm, myo.mask.shape + (2,)).copy()


def directional_strain(tensors: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """e_u = u^T E u per pixel and frame."""
    if tensors.shape[1:3] != direction.shape[:2]:
        raise StrainError(f"tensor grid {tensors.shape[1:3]} differs from direction grid {direction.shape[:2]}")
    return np.einsum("yxa,tyxab,yxb->tyx", direction, tensors, direction)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def eroded_mask(mask: np.ndarray, pixels: int = STRAIN_EROSION_PX) -> np.ndarray:
    """Mask shrunk by `pixels`, falling back to the input if nothing would remain."""
    eroded = binary_erosion(mask, iterations=pixels) if pixels > 0 else np.asarray(mask, dtype=bool)
    if not eroded.any():
        logger.warning(f"Eroding the mask by {pixels} px leaves nothing; using the full mask")
        return np.asarray(mask, dtype=bool)
    return eroded


def global_strain(strain_map: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Unweighted mean over the mask, one value per frame."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise StrainError("cannot average strain over an empty mask")
    return strain_map[:, mask].mean(axis=1)


def segment_labels(myo: MyoMask, n_segments: int, reference_angle: Optional[float] = None) -> np.ndarray:
    """Sector index per mask pixel (-1 elsewhere), counterclockwise from the reference angle."""
    if n_segments not in SEGMENT_CHOICES:
        raise StrainError(f"segments must be one of {SEGMENT_CHOICES}, got {n_segments}")
    if reference_angle is None:
        reference_angle = myo.reference_angle
    n_y, n_x = myo.mask.shape
    cx, cy = myo.centroid
    xs, ys = np.meshgrid(np.arange(1, n_x + 1, dtype=np.float64), np.arange(1, n_y + 1, dtype=np.float64))
    angle = np.mod(np.arctan2(ys - cy, xs - cx) - reference_angle, 2.0 * np.pi)
    labels = np.minimum((angle / (2.0 * np.pi / n_segments)).astype(int), n_segments - 1)
    return np.where(myo.mask, labels, -1)


def segmental_strain(
    strain_map: np.ndarray,
    myo: MyoMask,
    n_segments: int,
    reference_angle: Optional[float] = None,
    valid: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    (n_segments, N_t) sector means; empty sectors are NaN, not zero.

    `valid` narrows the mask to the pixels the global curves average over.
    """
    labels = segment_labels(myo, n_segments, reference_angle)
    if valid is not None:
        labels = np.where(valid, labels, -1)
    out = np.full((n_segments, strain_map.shape[0]), np.nan)
    for segment in range(n_segments):
        members = labels == segment
        if members.any():
            out[segment] = strain_map[:, members].mean(axis=1)
        else:
            logger.warning(f"Segment {segment + 1} of {n_segments} has no mask pixels")
    return out


def compute_strain(
    traj: TrajectoryField,
    myo: MyoMask,
    n_segments: Optional[int] = None,
    segment_direction: str = "circumferential",
    long_axis: Optional[Tuple[float, float]] = None,
    erosion: int = STRAIN_EROSION_PX,
) -> StrainField:
    """
    Full strain analysis of one trajectory field.

    Global curves are keyed GRS/GCS (and GLS with a long-axis direction), with
    `_eroded` variants over the eroded mask and `seg_k` for sectors of
    `segment_direction`.
    """
    if traj.grid != myo.grid:
        raise StrainError(f"trajectory grid {traj.grid} differs from mask grid {myo.grid}")
    tensors = green_lagrange(traj)
    dirs = direction_field(myo)
    maps = {
        "radial": directional_strain(tensors, dirs.radial),
        "circumferential": directional_strain(tensors, dirs.circumferential),
    }
    if long_axis is not None:
        maps["longitudinal"] = directional_strain(tensors, constant_direction_field(myo, long_axis))

    names = {"radial": "GRS", "circumferential": "GCS", "longitudinal": "GLS"}
    core = eroded_mask(dirs.valid, erosion)
    global_values: Dict[str, np.ndarray] = {}
    for direction, strain_map in maps.items():
        global_values[names[direction]] = global_strain(strain_map, dirs.valid)
    for direction, strain_map in maps.items():
        global_values[f"{names[direction]}_eroded"] = global_strain(strain_map, core)

    if n_segments is not None:
        if segment_direction not in maps:
            raise StrainError(f"no '{segment_direction}' strain to segment")
        sectors = segmental_strain(maps[segment_direction], myo, n_segments, valid=dirs.valid)
        for index, curve in enumerate(sectors, start=1):
            global_values[f"seg_{index}"] = curve

    folded = jacobian_determinant(traj)[:, dirs.valid] <= 0
    if folded.any():
        logger.warning(f"{int(folded.sum())} myocardial pixel-frames have a non-positive Jacobian")
    return StrainField(tensors=tensors, maps=maps, global_values=global_values)
