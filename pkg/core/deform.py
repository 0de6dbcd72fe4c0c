"""
Free-form B-spline deformation: control mesh, dense displacement, the zero-mean
reference projection, prolongation between pyramid levels, and the inversion
and composition that map everything onto the first frame.

Control point index c along an axis sits at 0-based pixel (c - 1) * spacing, so
a pixel at x uses controls floor(x / spacing) .. floor(x / spacing) + 3.
"""
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.ndimage import spline_filter1d

from config.settings import (
    INVERSION_MAX_ITERATIONS,
    INVERSION_TOLERANCE,
    INVERSION_WARN_RESIDUAL,
    PYRAMID_FACTOR,
)
from core.imaging import pixel_grid, sample_frame

# Dense (N_t, N_y, N_x, 2) array of (dx, dy) in pixels.
DisplacementField = np.ndarray


class DeformError(ValueError):
    """Mesh, grid or field shapes that cannot be combined."""


def mesh_size(n: int, spacing: int) -> int:
    """Control points needed along an axis of n pixels."""
    return (n - 1) // spacing + 4


@dataclass(frozen=True)
class ControlMesh:
    """phi(i, j, t) stored as (N_t, n_j, n_i, 2) for a grid of (N_x, N_y) pixels."""

    values: np.ndarray
    spacing: int
    grid: Tuple[int, int]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        n_x, n_y = self.grid
        if self.spacing < 1:
            raise DeformError(f"control spacing must be >= 1, got {self.spacing}")
        expected = (mesh_size(n_y, self.spacing), mesh_size(n_x, self.spacing), 2)
        if values.ndim != 4 or values.shape[1:] != expected:
            raise DeformError(
                f"mesh shape {values.shape} does not serve a {n_x}x{n_y} grid "
                f"at spacing {self.spacing} (expected (N_t,) + {expected})"
            )
        if not np.isfinite(values).all():
            raise DeformError("control mesh contains non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray) -> "ControlMesh":
        return replace(self, values=values)


def zero_mesh(grid: Tuple[int, int], frames: int, spacing: int) -> ControlMesh:
    n_x, n_y = grid
    shape = (frames, mesh_size(n_y, spacing), mesh_size(n_x, spacing), 2)
    return ControlMesh(values=np.zeros(shape), spacing=spacing, grid=grid)


@dataclass(frozen=True)
class TrajectoryField:
    """
    T_{1->t}(x) - x on the frame-1 grid, shaped (N_t, N_y, N_x, 2).

    `converged` and `residual` carry the status of the frame-1 inversion when
    the field came from a groupwise registration.
    """

    values: np.ndarray
    converged: bool = True
    residual: float = 0.0

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.values.shape[2], self.values.shape[1]


# ---------------------------------------------------------------------------
# B-spline basis
# ---------------------------------------------------------------------------

def _basis(u: np.ndarray) -> np.ndarray:
    u2, u3 = u * u, u * u * u
    return np.stack(
        [
            (1.0 - u) ** 3 / 6.0,
            (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
            (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
            u3 / 6.0,
        ],
        axis=-1,
    )


def bspline_weights(u: float) -> np.ndarray:
    """Uniform cubic B-spline weights (B_0, B_1, B_2, B_3) at fraction u."""
    if not 0.0 <= u < 1.0:
        raise DeformError(f"B-spline fraction must lie in [0, 1), got {u}")
    return _basis(np.float64(u))


def _locate(coords: np.ndarray, spacing: int, n_ctrl: int) -> Tuple[np.ndarray, np.ndarray]:
    """First control index and the four weights for 0-based coordinates."""
    scaled = np.asarray(coords, dtype=np.float64) / spacing
    base = np.minimum(np.floor(scaled).astype(np.intp), n_ctrl - 4)
    return base, _basis(scaled - base)


def axis_weights(n: int, spacing: int) -> np.ndarray:
    """(n, n_ctrl) matrix W with W[x, base + k] = B_k(u_x); dense = Wy phi Wx^T."""
    n_ctrl = mesh_size(n, spacing)
    base, weights = _locate(np.arange(n), spacing, n_ctrl)
    matrix = np.zeros((n, n_ctrl))
    rows = np.arange(n)
    for k in range(4):
        matrix[rows, base + k] = weights[:, k]
    return matrix


def evaluate_points(frame_values: np.ndarray, xs: np.ndarray, ys: np.ndarray, spacing: int) -> np.ndarray:
    """
    Displacement of one mesh frame (n_j, n_i, 2) at 0-based points, clamped to
    the area the mesh covers. Returns (..., 2).
    """
    n_j, n_i = frame_values.shape[:2]
    max_x = (n_i - 4) * spacing + spacing - 1e-9
    max_y = (n_j - 4) * spacing + spacing - 1e-9
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, max_x)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, max_y)
    bi, wx = _locate(xs, spacing, n_i)
    bj, wy = _locate(ys, spacing, n_j)
    out = np.zeros(xs.shape + (2,))
    for l in range(4):
        for k in range(4):
            weight = (wy[..., l] * wx[..., k])[..., None]
            out += weight * frame_values[bj + l, bi + k]
    return out


def evaluate_displacement(mesh: ControlMesh, x: Tuple[float, float], t: int) -> np.ndarray:
    """d(x, t) at a 1-based pixel coordinate and 1-based frame."""
    n_x, n_y = mesh.grid
    px, py = x
    if not (1 <= px <= n_x and 1 <= py <= n_y):
        raise DeformError(f"point {x} lies outside the {n_x}x{n_y} grid")
    if not 1 <= t <= mesh.frames:
        raise DeformError(f"frame {t} outside 1..{mesh.frames}")
    i, u = divmod((px - 1.0) / mesh.spacing, 1.0)
    j, v = divmod((py - 1.0) / mesh.spacing, 1.0)
    i, j = int(i), int(j)
    bu, bv = _basis(np.float64(u)), _basis(np.float64(v))
    phi = mesh.values[t - 1]
    out = np.zeros(2)
    for l in range(4):
        for k in range(4):
            out += bu[k] * bv[l] * phi[j + l, i + k]
    return out


def dense_displacement(mesh: ControlMesh, grid: Tuple[int, int] = None) -> DisplacementField:
    """The B-spline sum at every pixel and frame, as the separable product Wy phi Wx^T."""
    if grid is not None and tuple(grid) != tuple(mesh.grid):
        raise DeformError(f"mesh serves {mesh.grid}, asked for {grid}")
    n_x, n_y = mesh.grid
    wx = axis_weights(n_x, mesh.spacing)
    wy = axis_weights(n_y, mesh.spacing)
    return np.einsum("yj,tjic,xi->tyxc", wy, mesh.values, wx, optimize=True)


def mesh_adjoint(dense: np.ndarray, mesh: ControlMesh) -> np.ndarray:
    """Pull a per-pixel gradient (N_t, N_y, N_x, 2) back onto the control points."""
    n_x, n_y = mesh.grid
    wx = axis_weights(n_x, mesh.spacing)
    wy = axis_weights(n_y, mesh.spacing)
    return np.einsum("yj,tyxc,xi->tjic", wy, dense, wx, optimize=True)


def project_zero_mean(mesh: ControlMesh) -> ControlMesh:
    """Euclidean projection onto sum_t phi(i, j, t) = 0."""
    values = mesh.values - mesh.values.mean(axis=0, keepdims=True)
    return mesh.with_values(values)


def prolong_mesh(
    mesh: ControlMesh,
    fine_grid: Tuple[int, int],
    fine_spacing: int,
    zero_mean: bool = True,
) -> ControlMesh:
    """
    Carry a coarse solution to the next finer level.

    The coarse field is doubled (vectors and coordinates), sampled where each
    fine control point sits, and turned into coefficients with the cubic
    B-spline interpolation prefilter. Single-frame pairwise meshes pass
    zero_mean=False, since the temporal projection would erase them.
    """
    n_xc, n_yc = mesh.grid
    n_xf, n_yf = fine_grid
    if -(-n_xf // PYRAMID_FACTOR) != n_xc or -(-n_yf // PYRAMID_FACTOR) != n_yc:
        raise DeformError(
            f"fine grid {fine_grid} is not a {PYRAMID_FACTOR}x refinement of {mesh.grid}"
        )
    n_i, n_j = mesh_size(n_xf, fine_spacing), mesh_size(n_yf, fine_spacing)
    sites_x = (np.arange(n_i) - 1.0) * fine_spacing
    sites_y = (np.arange(n_j) - 1.0) * fine_spacing
    grid_x, grid_y = np.meshgrid(sites_x, sites_y)
    # fine pixel centre x_f sits at coarse (x_f - 0.5) / 2, 0-based
    coarse_x = (grid_x - 0.5) / PYRAMID_FACTOR
    coarse_y = (grid_y - 0.5) / PYRAMID_FACTOR

    samples = np.stack(
        [
            PYRAMID_FACTOR * evaluate_points(frame, coarse_x, coarse_y, mesh.spacing)
            for frame in mesh.values
        ]
    )
    coefficients = spline_filter1d(samples, order=3, axis=1, mode="mirror")
    coefficients = spline_filter1d(coefficients, order=3, axis=2, mode="mirror")
    fine = ControlMesh(values=coefficients, spacing=fine_spacing, grid=(n_xf, n_yf))
    return project_zero_mean(fine) if zero_mean else fine


# ---------------------------------------------------------------------------
# Inversion and composition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InversionResult:
    field: np.ndarray
    residual: float
    iterations: int
    converged: bool


def _sample_field(field: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return np.stack(
        [sample_frame(field[..., 0], xs, ys), sample_frame(field[..., 1], xs, ys)], axis=-1
    )


def invert_displacement(
    d1: np.ndarray,
    tolerance: float = INVERSION_TOLERANCE,
    max_iterations: int = INVERSION_MAX_ITERATIONS,
) -> InversionResult:
    """
    Fixed-point inverse of x -> x + d1(x) on the same grid:
    d_inv(x) <- -d1(x + d_inv(x)), starting from zero.
    """
    d1 = np.asarray(d1, dtype=np.float64)
    if d1.ndim != 3 or d1.shape[-1] != 2:
        raise DeformError(f"expected a (N_y, N_x, 2) field, got {d1.shape}")
    xs, ys = pixel_grid(*d1.shape[:2])
    inverse = np.zeros_like(d1)
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        updated = -_sample_field(d1, xs + inverse[..., 0], ys + inverse[..., 1])
        change = float(np.abs(updated - inverse).max())
        inverse = updated
        if change < tolerance:
            break

    mapped = inverse + _sample_field(d1, xs + inverse[..., 0], ys + inverse[..., 1])
    residual = float(np.linalg.norm(mapped, axis=-1).max())
    converged = residual <= INVERSION_WARN_RESIDUAL
    if not converged:
        logger.warning(
            f"Displacement inversion residual {residual:.3f} px after {iterations} iterations"
        )
    return InversionResult(field=inverse, residual=residual, iterations=iterations, converged=converged)


def compose_to_first_frame(disp: DisplacementField) -> TrajectoryField:
    """T_{1->t}(x) = T(T^{-1}(x, 1), t), expressed as displacement from x."""
    disp = np.asarray(disp, dtype=np.float64)
    if disp.ndim != 4 or disp.shape[-1] != 2:
        raise DeformError(f"expected a (N_t, N_y, N_x, 2) field, got {disp.shape}")
    inversion = invert_displacement(disp[0])
    xs, ys = pixel_grid(*disp.shape[1:3])
    ref_x = xs + inversion.field[..., 0]
    ref_y = ys + inversion.field[..., 1]

    trajectory = np.empty_like(disp)
    for t in range(disp.shape[0]):
        trajectory[t] = inversion.field + _sample_field(disp[t], ref_x, ref_y)
    trajectory[0] = 0.0
    return TrajectoryField(
        values=trajectory, converged=inversion.converged, residual=inversion.residual
    )


def compose_pairwise_chain(step_fields: Sequence[np.ndarray]) -> TrajectoryField:
    """T_{1->t} = T_{t-1->t} o T_{1->t-1}, starting from the identity."""
    if not step_fields:
        raise DeformError("pairwise chain needs at least one step field")
    shape = np.shape(step_fields[0])
    for index, step in enumerate(step_fields):
        if np.shape(step) != shape or len(shape) != 3 or shape[-1] != 2:
            raise DeformError(f"step field {index + 2} has shape {np.shape(step)}, expected {shape}")
    xs, ys = pixel_grid(*shape[:2])
    current = np.zeros(shape)
    trajectory: List[np.ndarray] = [current]
    for step in step_fields:
        step = np.asarray(step, dtype=np.float64)
        current = current + _sample_field(step, xs + current[..., 0], ys + current[..., 1])
        trajectory.append(current)
    return TrajectoryField(values=np.stack(trajectory))
