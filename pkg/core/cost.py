"""
Objective terms for groupwise and pairwise registration, with their gradients.

Dissimilarities return a per-voxel, per-frame gradient with respect to the
warped intensities; regularizers return one with respect to the dense
displacement. `total_cost` chains both back onto the control mesh through the
exact derivative of the bilinear warp and the B-spline weights.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from config.settings import SINGULAR_VALUE_CUTOFF
from core.deform import ControlMesh, dense_displacement, mesh_adjoint
from core.imaging import CineSequence, GradientImage, cell_slopes, pixel_grid, sample_with_gradient

KINDS = ("llr", "glr", "variance")


class CostError(ValueError):
    """Bad cost parameters, layouts or mismatched grids."""


class NuclearNormError(ArithmeticError):
    """The SVD behind a nuclear norm did not converge."""


@dataclass(frozen=True)
class PatchLayout:
    """Overlapped square patches; origins are 1-based top-left pixels per axis."""

    size: int
    spacing: int
    origins_x: Tuple[int, ...]
    origins_y: Tuple[int, ...]
    grid: Tuple[int, int]

    @property
    def origins(self) -> List[Tuple[int, int]]:
        return [(x, y) for y in self.origins_y for x in self.origins_x]

    @property
    def count(self) -> int:
        return len(self.origins_x) * len(self.origins_y)


@dataclass(frozen=True)
class CostParams:
    kind: str = "llr"
    spatial_weight: float = 0.0
    temporal_weight: float = 0.0
    patch_size: int = 5
    patch_spacing: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CostError(f"unknown dissimilarity '{self.kind}', expected one of {KINDS}")
        if self.spatial_weight < 0 or self.temporal_weight < 0:
            raise CostError("regularization weights must be nonnegative")
        if self.patch_size < 2:
            raise CostError(f"patch size must be >= 2, got {self.patch_size}")
        if not 1 <= self.patch_spacing <= self.patch_size:
            raise CostError(
                f"patch spacing must lie in [1, {self.patch_size}], got {self.patch_spacing}"
            )


@dataclass(frozen=True)
class CostReport:
    total: float
    dissimilarity: float
    spatial: float
    temporal: float
    gradient: np.ndarray


# ---------------------------------------------------------------------------
# Patches and Casorati matrices
# ---------------------------------------------------------------------------

def _axis_origins(n: int, size: int, spacing: int) -> Tuple[int, ...]:
    last = n - size + 1
    origins = set(range(1, last + 1, spacing))
    origins.add(last)
    return tuple(sorted(origins))


def build_patch_layout(grid: Tuple[int, int], size: int, spacing: int) -> PatchLayout:
    n_x, n_y = grid
    if size > min(n_x, n_y):
        raise CostError(f"patch size {size} does not fit a {n_x}x{n_y} grid")
    if size < 1 or spacing < 1:
        raise CostError(f"patch size and spacing must be positive, got {size}/{spacing}")
    return PatchLayout(
        size=size,
        spacing=spacing,
        origins_x=_axis_origins(n_x, size, spacing),
        origins_y=_axis_origins(n_y, size, spacing),
        grid=(n_x, n_y),
    )


def layout_for_grid(grid: Tuple[int, int], size: int, spacing: int) -> PatchLayout:
    """Like build_patch_layout, but clips an oversized patch to the grid."""
    limit = min(grid)
    if size > limit:
        logger.warning(f"Patch size {size} exceeds the {grid[0]}x{grid[1]} grid; clipped to {limit}")
        size, spacing = limit, min(spacing, limit)
    return build_patch_layout(grid, size, spacing)


def build_casorati(seq: CineSequence, region: np.ndarray) -> np.ndarray:
    """Rows are the region's voxels in raster order, columns are frames."""
    region = np.asarray(region, dtype=bool)
    if region.shape != (seq.height, seq.width):
        raise CostError(f"region shape {region.shape} does not match grid {seq.height}x{seq.width}")
    if not region.any():
        raise CostError("cannot build a Casorati matrix from an empty region")
    return seq.data[:, region].T.copy()


def _patch_stack(data: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """(N_c, p*p, N_t) local Casorati matrices in layout order."""
    p = layout.size
    offsets = np.arange(p)
    ys = np.array([y - 1 for _, y in layout.origins])
    xs = np.array([x - 1 for x, _ in layout.origins])
    rows = ys[:, None, None] + offsets[None, :, None]
    cols = xs[:, None, None] + offsets[None, None, :]
    patches = data[:, rows, cols]  # (N_t, N_c, p, p)
    return patches.reshape(data.shape[0], layout.count, p * p).transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# Nuclear norm
# ---------------------------------------------------------------------------

def _nuclear_batch(stack: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    try:
        u, s, vt = np.linalg.svd(stack, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NuclearNormError(f"SVD failed on {stack.shape[-2]}x{stack.shape[-1]} matrices: {e}") from e
    keep = s > SINGULAR_VALUE_CUTOFF * s.max(axis=-1, keepdims=True)
    subgradient = np.einsum("...ik,...k,...kj->...ij", u, keep.astype(np.float64), vt)
    return s.sum(axis=-1), subgradient


def nuclear_norm(matrix: np.ndarray) -> Tuple[float, np.ndarray]:
    """Sum of singular values and the subgradient U V^T over the kept triplets."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or not np.isfinite(matrix).all():
        raise CostError("nuclear norm needs a finite 2D matrix")
    value, subgradient = _nuclear_batch(matrix[None])
    return float(value[0]), subgradient[0]


def _nuclear_patches(stack: np.ndarray, workers: int) -> Tuple[np.ndarray, np.ndarray]:
    """Batched per-patch nuclear norms; chunks merge in patch order."""
    if workers <= 1 or len(stack) < 2 * workers:
        return _nuclear_batch(stack)
    chunks = np.array_split(stack, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_nuclear_batch, chunks))
    return (
        np.concatenate([values for values, _ in results]),
        np.concatenate([grads for _, grads in results]),
    )


# ---------------------------------------------------------------------------
# Dissimilarities
# ---------------------------------------------------------------------------

def _llr(data: np.ndarray, layout: PatchLayout, workers: int) -> Tuple[float, np.ndarray]:
    if layout.grid != (data.shape[2], data.shape[1]):
        raise CostError(f"layout built for {layout.grid}, sequence is {data.shape[2]}x{data.shape[1]}")
    p = layout.size
    values, subgradients = _nuclear_patches(_patch_stack(data, layout), workers)
    grad = np.zeros_like(data)
    blocks = subgradients.reshape(layout.count, p, p, data.shape[0]).transpose(0, 3, 1, 2)
    for block, (x, y) in zip(blocks, layout.origins):
        grad[:, y - 1 : y - 1 + p, x - 1 : x - 1 + p] += block
    return float(values.sum()), grad


def _glr(data: np.ndarray) -> Tuple[float, np.ndarray]:
    casorati = data.reshape(data.shape[0], -1).T
    value, subgradient = nuclear_norm(casorati)
    return value, subgradient.T.reshape(data.shape)


def _variance(data: np.ndarray) -> Tuple[float, np.ndarray]:
    n_t = data.shape[0]
    centred = data - data.mean(axis=0, keepdims=True)
    return float((centred ** 2).sum() / n_t), 2.0 * centred / n_t


def dissimilarity(
    seq_warped: CineSequence,
    layout: Optional[PatchLayout],
    kind: str,
    workers: int = 1,
) -> Tuple[float, np.ndarray]:
    """Value and gradient with respect to every warped intensity f~(x, t)."""
    if kind == "llr":
        if layout is None:
            raise CostError("llr needs a patch layout")
        return _llr(seq_warped.data, layout, workers)
    if kind == "glr":
        return _glr(seq_warped.data)
    if kind == "variance":
        return _variance(seq_warped.data)
    raise CostError(f"unknown dissimilarity '{kind}', expected one of {KINDS}")


def local_rank_map(seq: CineSequence, layout: PatchLayout, workers: int = 1) -> np.ndarray:
    """Per-pixel mean nuclear norm of the patches covering it, (N_y, N_x)."""
    values, _ = _nuclear_patches(_patch_stack(seq.data, layout), workers)
    total = np.zeros((seq.height, seq.width))
    hits = np.zeros_like(total)
    p = layout.size
    for value, (x, y) in zip(values, layout.origins):
        total[y - 1 : y - 1 + p, x - 1 : x - 1 + p] += value
        hits[y - 1 : y - 1 + p, x - 1 : x - 1 + p] += 1.0
    return total / hits


def relative_reduction(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """(before - after) / before, zero where before is zero."""
    before = np.asarray(before, dtype=np.float64)
    safe = np.where(before > 0, before, 1.0)
    return np.where(before > 0, (before - np.asarray(after)) / safe, 0.0)


# ---------------------------------------------------------------------------
# Regularizers
# ---------------------------------------------------------------------------

def _second_difference(field: np.ndarray, axis: int) -> np.ndarray:
    n = field.shape[axis]

    def window(offset: int) -> np.ndarray:
        index = [slice(None)] * field.ndim
        index[axis] = slice(offset, n - 2 + offset)
        return field[tuple(index)]

    return window(0) - 2.0 * window(1) + window(2)


def _second_difference_adjoint(residual: np.ndarray, axis: int, n: int) -> np.ndarray:
    shape = list(residual.shape)
    shape[axis] = n
    out = np.zeros(shape)
    index = [slice(None)] * residual.ndim
    for offset, weight in ((0, 1.0), (1, -2.0), (2, 1.0)):
        index[axis] = slice(offset, n - 2 + offset)
        out[tuple(index)] += weight * residual
    return out


_CROSS_TAPS = ((2, 2, 0.25), (2, 0, -0.25), (0, 2, -0.25), (0, 0, 0.25))


def _cross_difference(field: np.ndarray) -> np.ndarray:
    n_y, n_x = field.shape[1], field.shape[2]
    return sum(
        w * field[:, a : n_y - 2 + a, b : n_x - 2 + b] for a, b, w in _CROSS_TAPS
    )


def _cross_difference_adjoint(residual: np.ndarray, n_y: int, n_x: int) -> np.ndarray:
    out = np.zeros((residual.shape[0], n_y, n_x) + residual.shape[3:])
    for a, b, w in _CROSS_TAPS:
        out[:, a : n_y - 2 + a, b : n_x - 2 + b] += w * residual
    return out


def spatial_regularizer(disp: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Bending energy sum ||T_xx||^2 + 2||T_xy||^2 + ||T_yy||^2 over every voxel and
    frame, raw. Stencils only count where all their taps are inside the grid.
    """
    disp = np.asarray(disp, dtype=np.float64)
    _, n_y, n_x, _ = disp.shape
    if n_x < 3 or n_y < 3:
        raise CostError(f"bending energy needs a grid of at least 3x3, got {n_x}x{n_y}")
    r_xx = _second_difference(disp, axis=2)
    r_yy = _second_difference(disp, axis=1)
    r_xy = _cross_difference(disp)
    value = float((r_xx ** 2).sum() + 2.0 * (r_xy ** 2).sum() + (r_yy ** 2).sum())
    grad = (
        2.0 * _second_difference_adjoint(r_xx, 2, n_x)
        + 2.0 * _second_difference_adjoint(r_yy, 1, n_y)
        + 4.0 * _cross_difference_adjoint(r_xy, n_y, n_x)
    )
    return value, grad


def temporal_regularizer(disp: np.ndarray) -> Tuple[float, np.ndarray]:
    """Cyclic second differences over time, summed squared."""
    disp = np.asarray(disp, dtype=np.float64)
    if disp.shape[0] < 3:
        raise CostError(f"temporal regularizer needs at least 3 frames, got {disp.shape[0]}")
    residual = np.roll(disp, -1, axis=0) - 2.0 * disp + np.roll(disp, 1, axis=0)
    grad = 2.0 * (np.roll(residual, -1, axis=0) - 2.0 * residual + np.roll(residual, 1, axis=0))
    return float((residual ** 2).sum()), grad


# ---------------------------------------------------------------------------
# Assembled objectives
# ---------------------------------------------------------------------------

def sequence_slopes(seq: CineSequence) -> List[GradientImage]:
    """Per-frame cell slopes, computed once per pyramid level."""
    return [cell_slopes(frame) for frame in seq.data]


def _warp_with_gradient(
    data: np.ndarray, disp: np.ndarray, slopes: Sequence[GradientImage]
) -> Tuple[np.ndarray, np.ndarray]:
    """Warped frames and d f~ / d d, shaped (N_t, N_y, N_x) and (N_t, N_y, N_x, 2)."""
    xs, ys = pixel_grid(data.shape[1], data.shape[2])
    warped = np.empty_like(data)
    jacobian = np.empty(data.shape + (2,))
    for t in range(data.shape[0]):
        warped[t], jacobian[t, ..., 0], jacobian[t, ..., 1] = sample_with_gradient(
            data[t], xs + disp[t, ..., 0], ys + disp[t, ..., 1], slopes[t]
        )
    return warped, jacobian


def total_cost(
    mesh: ControlMesh,
    seq: CineSequence,
    slopes: Sequence[GradientImage],
    params: CostParams,
    layout: Optional[PatchLayout] = None,
    workers: int = 1,
) -> CostReport:
    """
    D + lambda * R_spatial + mu * R_temporal and its gradient on the mesh.

    The intensity derivative is the exact derivative of the bilinear
    interpolant (`cell_slopes`), not a sampled image gradient, so the
    gradient matches finite differences of the cost itself.
    """
    if mesh.grid != seq.grid or mesh.frames != seq.frames:
        raise CostError(
            f"mesh serves {mesh.grid}x{mesh.frames}, sequence is {seq.grid}x{seq.frames}"
        )
    if len(slopes) != seq.frames:
        raise CostError(f"{len(slopes)} slope images for {seq.frames} frames")
    if params.kind == "llr" and layout is None:
        layout = layout_for_grid(seq.grid, params.patch_size, params.patch_spacing)

    disp = dense_displacement(mesh)
    warped, jacobian = _warp_with_gradient(seq.data, disp, slopes)
    value, intensity_grad = dissimilarity(seq.with_data(warped), layout, params.kind, workers)
    dense_grad = intensity_grad[..., None] * jacobian

    spatial = temporal = 0.0
    if params.spatial_weight > 0:
        spatial, spatial_grad = spatial_regularizer(disp)
        dense_grad += params.spatial_weight * spatial_grad
    if params.temporal_weight > 0:
        temporal, temporal_grad = temporal_regularizer(disp)
        dense_grad += params.temporal_weight * temporal_grad

    total = value + params.spatial_weight * spatial + params.temporal_weight * temporal
    return CostReport(
        total=total,
        dissimilarity=value,
        spatial=spatial,
        temporal=temporal,
        gradient=mesh_adjoint(dense_grad, mesh),
    )


def ssd_pairwise(
    frame_a: np.ndarray,
    frame_b: np.ndarray,
    mesh_step: ControlMesh,
    spatial_weight: float = 0.0,
    slopes_b: Optional[GradientImage] = None,
) -> CostReport:
    """sum_x (f_b(x + d(x)) - f_a(x))^2 + lambda * bending energy, one-frame mesh."""
    frame_a = np.asarray(frame_a, dtype=np.float64)
    frame_b = np.asarray(frame_b, dtype=np.float64)
    if frame_a.shape != frame_b.shape:
        raise CostError(f"frames differ in shape: {frame_a.shape} vs {frame_b.shape}")
    if mesh_step.frames != 1 or mesh_step.grid != (frame_a.shape[1], frame_a.shape[0]):
        raise CostError(f"pairwise mesh must be a single frame on the {frame_a.shape} grid")
    if slopes_b is None:
        slopes_b = cell_slopes(frame_b)

    disp = dense_displacement(mesh_step)
    warped, jacobian = _warp_with_gradient(frame_b[None], disp, [slopes_b])
    residual = warped[0] - frame_a
    value = float((residual ** 2).sum())
    dense_grad = (2.0 * residual)[None, ..., None] * jacobian

    spatial = 0.0
    if spatial_weight > 0:
        spatial, spatial_grad = spatial_regularizer(disp)
        dense_grad += spatial_weight * spatial_grad

    return CostReport(
        total=value + spatial_weight * spatial,
        dissimilarity=value,
        spatial=spatial,
        temporal=0.0,
        gradient=mesh_adjoint(dense_grad, mesh_step),
    )
