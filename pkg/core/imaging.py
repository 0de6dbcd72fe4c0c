"""
Cine image model, clamp-to-edge bilinear sampling, image gradients and the
multi-resolution pyramid.

Arrays are 0-based internally: a sequence is (N_t, N_y, N_x) and pixel (x, y)
lives at data[t, y, x]. The single-point `bilinear_sample` takes 1-based
coordinates, the convention used on the command line and in exported files.
"""
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import cv2
import numpy as np
from loguru import logger

from config.settings import (
    BINOMIAL_KERNEL,
    CATMULL_ROM_A,
    MIN_LEVEL_SIZE,
    PYRAMID_FACTOR,
)


class ImagingError(ValueError):
    """Invalid image data, grid mismatch or an impossible resampling request."""


class CorruptedFieldError(ArithmeticError):
    """A sampling coordinate went non-finite, which means the displacement did."""


@dataclass(frozen=True)
class CineSequence:
    """Spatiotemporal stack of one cardiac cycle on an isotropic pixel grid."""

    data: np.ndarray
    pixel_spacing: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 3:
            raise ImagingError(f"sequence must be (N_t, N_y, N_x), got shape {data.shape}")
        n_t, n_y, n_x = data.shape
        if n_x < MIN_LEVEL_SIZE or n_y < MIN_LEVEL_SIZE or n_t < 2:
            raise ImagingError(f"sequence too small: {n_x}x{n_y}x{n_t}")
        if not np.isfinite(data).all():
            raise ImagingError("sequence contains non-finite intensities")
        if not (self.pixel_spacing > 0 and math.isfinite(self.pixel_spacing)):
            raise ImagingError(f"pixel spacing must be positive, got {self.pixel_spacing}")

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> Tuple[int, int]:
        """(N_x, N_y)"""
        return self.width, self.height

    def with_data(self, data: np.ndarray) -> "CineSequence":
        return replace(self, data=data)


def validate_full_resolution(seq: CineSequence) -> None:
    """Input sequences (as opposed to pyramid levels) need at least 8x8 pixels."""
    if seq.width < 8 or seq.height < 8:
        raise ImagingError(f"input sequence must be at least 8x8, got {seq.width}x{seq.height}")


@dataclass(frozen=True)
class GradientImage:
    """Per-pixel (df/dx, df/dy) of one frame, intensity per pixel."""

    dx: np.ndarray
    dy: np.ndarray


def pixel_grid(n_y: int, n_x: int) -> Tuple[np.ndarray, np.ndarray]:
    """0-based (X, Y) coordinate arrays shaped (n_y, n_x)."""
    return np.meshgrid(np.arange(n_x, dtype=np.float64), np.arange(n_y, dtype=np.float64))


def normalize_intensities(seq: CineSequence) -> CineSequence:
    """Min-max rescale over the whole sequence to [0, 1]."""
    low, high = float(seq.data.min()), float(seq.data.max())
    if high - low <= 0:
        logger.warning("Sequence is constant; normalized to zeros")
        return seq.with_data(np.zeros_like(seq.data))
    return seq.with_data((seq.data - low) / (high - low))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _cell(coords: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left cell index, fraction within it, and whether the coordinate was inside."""
    clamped = np.clip(coords, 0.0, n - 1.0)
    base = np.minimum(np.floor(clamped).astype(np.intp), n - 2)
    inside = (coords >= 0.0) & (coords <= n - 1.0)
    return base, clamped - base, inside


def _check_finite(xs: np.ndarray, ys: np.ndarray) -> None:
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise CorruptedFieldError("non-finite sampling coordinate; the displacement field is corrupted")


def sample_frame(frame: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Clamp-to-edge bilinear sampling of one frame at 0-based coordinates."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    _check_finite(xs, ys)
    n_y, n_x = frame.shape
    x0, fx, _ = _cell(xs, n_x)
    y0, fy, _ = _cell(ys, n_y)
    top = (1.0 - fx) * frame[y0, x0] + fx * frame[y0, x0 + 1]
    bottom = (1.0 - fx) * frame[y0 + 1, x0] + fx * frame[y0 + 1, x0 + 1]
    return (1.0 - fy) * top + fy * bottom


def cell_slopes(frame: np.ndarray) -> GradientImage:
    """
    Forward differences f[x+1] - f[x] per cell, zero in the last column/row.

    These are the derivatives of the bilinear interpolant along one axis; the
    derivative at any point is their linear interpolation along the other axis.
    """
    dx = np.zeros_like(frame)
    dy = np.zeros_like(frame)
    dx[:, :-1] = frame[:, 1:] - frame[:, :-1]
    dy[:-1, :] = frame[1:, :] - frame[:-1, :]
    return GradientImage(dx=dx, dy=dy)


def sample_with_gradient(
    frame: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    slopes: Optional[GradientImage] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Bilinear values plus the exact derivative of the interpolant with respect to
    the sampling position. Outside the grid the clamp makes the derivative zero.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    _check_finite(xs, ys)
    if slopes is None:
        slopes = cell_slopes(frame)
    n_y, n_x = frame.shape
    x0, fx, inside_x = _cell(xs, n_x)
    y0, fy, inside_y = _cell(ys, n_y)

    top = (1.0 - fx) * frame[y0, x0] + fx * frame[y0, x0 + 1]
    bottom = (1.0 - fx) * frame[y0 + 1, x0] + fx * frame[y0 + 1, x0 + 1]
    values = (1.0 - fy) * top + fy * bottom

    grad_x = (1.0 - fy) * slopes.dx[y0, x0] + fy * slopes.dx[y0 + 1, x0]
    grad_y = (1.0 - fx) * slopes.dy[y0, x0] + fx * slopes.dy[y0, x0 + 1]
    return values, np.where(inside_x, grad_x, 0.0), np.where(inside_y, grad_y, 0.0)


def bilinear_sample(frame: np.ndarray, coord: Tuple[float, float]) -> float:
    """Sample one frame at a 1-based (x, y) coordinate."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.size == 0:
        raise ImagingError("bilinear_sample needs a nonempty 2D frame")
    x, y = coord
    if not (math.isfinite(x) and math.isfinite(y)):
        raise CorruptedFieldError(f"non-finite sampling coordinate {coord}")
    if min(frame.shape) < 2:
        frame = np.pad(frame, ((0, frame.shape[0] < 2), (0, frame.shape[1] < 2)), mode="edge")
    return float(sample_frame(frame, np.array(x - 1.0), np.array(y - 1.0)))


def _check_field_grid(seq: CineSequence, disp: np.ndarray) -> None:
    expected = seq.data.shape + (2,)
    if disp.shape != expected:
        raise ImagingError(f"displacement shape {disp.shape} does not match sequence {expected}")


def warp_sequence(seq: CineSequence, disp: np.ndarray) -> CineSequence:
    """f~(x, t) = f(x + d(x, t), t) with clamp-to-edge bilinear sampling."""
    disp = np.asarray(disp, dtype=np.float64)
    _check_field_grid(seq, disp)
    xs, ys = pixel_grid(seq.height, seq.width)
    warped = np.empty_like(seq.data)
    for t in range(seq.frames):
        warped[t] = sample_frame(seq.data[t], xs + disp[t, ..., 0], ys + disp[t, ..., 1])
    return seq.with_data(warped)


def image_gradient(frame: np.ndarray) -> GradientImage:
    """Central differences inside, one-sided at the borders."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or min(frame.shape) < 2:
        raise ImagingError(f"image_gradient needs a 2D frame of at least 2x2, got {frame.shape}")
    if not np.isfinite(frame).all():
        raise ImagingError("image_gradient got non-finite intensities")
    dy, dx = np.gradient(frame)
    return GradientImage(dx=dx, dy=dy)


# ---------------------------------------------------------------------------
# Pyramid
# ---------------------------------------------------------------------------

def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    a = CATMULL_ROM_A
    t2, t3 = t * t, t * t * t
    return np.stack(
        [
            a * t3 - 2.0 * a * t2 + a * t,
            (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0,
            -(a + 2.0) * t3 + (2.0 * a + 3.0) * t2 - a * t,
            -a * t3 + a * t2,
        ],
        axis=-1,
    )


def _resampling_matrix(n_in: int, factor: int) -> np.ndarray:
    """Rows sample the input at pixel-centre-aligned positions f*k + (f-1)/2."""
    n_out = -(-n_in // factor)
    positions = factor * np.arange(n_out, dtype=np.float64) + (factor - 1) / 2.0
    base = np.floor(positions).astype(np.intp)
    weights = _catmull_rom_weights(positions - base)
    matrix = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in range(4):
        cols = np.clip(base - 1 + k, 0, n_in - 1)
        np.add.at(matrix, (rows, cols), weights[:, k])
    return matrix


def _binomial_kernel(octave: int) -> np.ndarray:
    step = 2 ** octave
    kernel = np.zeros(4 * step + 1)
    kernel[::step] = np.asarray(BINOMIAL_KERNEL) / sum(BINOMIAL_KERNEL)
    return kernel


def _antialias(frame: np.ndarray, octaves: int) -> np.ndarray:
    for octave in range(octaves):
        kernel = _binomial_kernel(octave)
        frame = cv2.sepFilter2D(
            frame, cv2.CV_64F, kernel, kernel, borderType=cv2.BORDER_REPLICATE
        )
    return frame


def downsample(seq: CineSequence, factor: int) -> CineSequence:
    """Binomial low-pass then Catmull-Rom resampling; time is never downsampled."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ImagingError(f"downsampling factor must be a positive integer, got {factor}")
    if factor == 1:
        return seq
    n_x, n_y = -(-seq.width // factor), -(-seq.height // factor)
    if n_x < MIN_LEVEL_SIZE or n_y < MIN_LEVEL_SIZE:
        raise ImagingError(
            f"downsampling {seq.width}x{seq.height} by {factor} gives {n_x}x{n_y}, "
            f"below the {MIN_LEVEL_SIZE}-pixel minimum"
        )
    octaves = (int(factor) - 1).bit_length()
    rx = _resampling_matrix(seq.width, factor)
    ry = _resampling_matrix(seq.height, factor)
    filtered = np.stack([_antialias(frame, octaves) for frame in seq.data])
    data = np.einsum("yi,tij,xj->tyx", ry, filtered, rx)
    return CineSequence(data=data, pixel_spacing=seq.pixel_spacing * factor)


def build_pyramid(seq: CineSequence, levels: int) -> List[CineSequence]:
    """Coarse to fine; the last entry is the input itself."""
    if levels < 1:
        raise ImagingError(f"pyramid needs at least one level, got {levels}")
    coarsest = PYRAMID_FACTOR ** (levels - 1)
    if -(-min(seq.width, seq.height) // coarsest) < MIN_LEVEL_SIZE:
        raise ImagingError(
            f"{levels} levels is too many for a {seq.width}x{seq.height} image"
        )
    pyramid = [downsample(seq, PYRAMID_FACTOR ** (levels - 1 - k)) for k in range(levels)]
    logger.debug(
        "Pyramid sizes: " + ", ".join(f"{level.width}x{level.height}" for level in pyramid)
    )
    return pyramid
