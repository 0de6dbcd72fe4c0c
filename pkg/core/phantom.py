"""
Analytic short-axis phantom with exact motion and strain.

A textured annulus (myocardium) around a bright blood pool contracts
radially over one cycle:

    s(t) = 1 - A * sin^2(pi * (t - 1) / N_t)

In "scale" mode every radius up to r_o shrinks by s(t). In "incompressible"
mode the blood pool scales but the wall keeps its area, so it thickens while
the cavity shrinks. Beyond r_o the displacement fades to zero over a cosine
taper of width m. Frames sample the reference texture through the exact
inverse map, so the ground truth is known to machine precision.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from loguru import logger

from config.settings import (
    DEFAULT_SEED,
    PHANTOM_AMPLITUDE,
    PHANTOM_EDGE_WIDTH,
    PHANTOM_FRAMES,
    PHANTOM_INNER_RADIUS,
    PHANTOM_MODE,
    PHANTOM_NOISE,
    PHANTOM_OUTER_RADIUS,
    PHANTOM_PIXEL_SPACING,
    PHANTOM_SIZE,
    PHANTOM_TAPER,
    PHANTOM_TEXTURE,
    PHANTOM_TEXTURE_WEIGHT,
    PHANTOM_TISSUE_INTENSITY,
)
from core.deform import TrajectoryField
from core.imaging import CineSequence, image_gradient
from core.strain import MyoMask

MODES = ("scale", "incompressible")

# Below this mean gradient magnitude on the wall the texture gives no tracking signal.
_MIN_TEXTURE_GRADIENT = 1e-3
_BISECTION_STEPS = 60


class PhantomError(ValueError):
    """Invalid phantom geometry, motion or texture."""


@dataclass(frozen=True)
class PhantomSpec:
    width: int = PHANTOM_SIZE
    height: int = PHANTOM_SIZE
    frames: int = PHANTOM_FRAMES
    center: Optional[Tuple[float, float]] = None
    inner_radius: float = PHANTOM_INNER_RADIUS
    outer_radius: float = PHANTOM_OUTER_RADIUS
    amplitude: float = PHANTOM_AMPLITUDE
    mode: str = PHANTOM_MODE
    tissue: Dict[str, float] = field(default_factory=lambda: dict(PHANTOM_TISSUE_INTENSITY))
    texture: Tuple = PHANTOM_TEXTURE
    texture_weight: Dict[str, float] = field(default_factory=lambda: dict(PHANTOM_TEXTURE_WEIGHT))
    noise: float = PHANTOM_NOISE
    taper: float = PHANTOM_TAPER
    edge_width: float = PHANTOM_EDGE_WIDTH
    pixel_spacing: float = PHANTOM_PIXEL_SPACING
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.mode not in MODES:
            raise PhantomError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.width < 8 or self.height < 8 or self.frames < 2:
            raise PhantomError(f"phantom too small: {self.width}x{self.height}x{self.frames}")
        if not 0.0 <= self.amplitude < 1.0:
            raise PhantomError(f"amplitude must be in [0, 1), got {self.amplitude}")
        if self.taper <= 0:
            raise PhantomError(f"taper margin must be positive, got {self.taper}")
        limit = min(self.width, self.height) / 2.0 - self.taper
        if not 0.0 < self.inner_radius < self.outer_radius < limit:
            raise PhantomError(
                f"radii must satisfy 0 < r_i < r_o < {limit:g}, "
                f"got r_i={self.inner_radius}, r_o={self.outer_radius}"
            )
        if self.noise < 0:
            raise PhantomError(f"noise must be nonnegative, got {self.noise}")
        missing = {"blood", "myocardium", "background"} - set(self.tissue)
        if missing:
            raise PhantomError(f"tissue intensities missing: {sorted(missing)}")
        missing = {"blood", "myocardium", "background"} - set(self.texture_weight)
        if missing:
            raise PhantomError(f"texture weights missing: {sorted(missing)}")
        if any(w < 0 for w in self.texture_weight.values()):
            raise PhantomError(f"texture weights must be nonnegative, got {self.texture_weight}")
        if self.texture_weight["myocardium"] <= 0:
            raise PhantomError("the myocardium needs texture to be trackable")
        self._validate_texture()

    def _validate_texture(self):
        if len(self.texture) < 2:
            raise PhantomError("texture needs at least two sinusoidal components")
        floor = 0.1 * abs(self.tissue["myocardium"])
        for (kx, ky), amplitude in self.texture:
            if kx == 0 or ky == 0:
                raise PhantomError(f"texture wave vector ({kx}, {ky}) is axis-aligned")
            if abs(amplitude) < floor:
                raise PhantomError(f"texture amplitude {amplitude} is below 10% of the myocardial intensity")

    @property
    def centre(self) -> Tuple[float, float]:
        """1-based (x, y); the grid centre unless given."""
        if self.center is not None:
            return float(self.center[0]), float(self.center[1])
        return (self.width + 1) / 2.0, (self.height + 1) / 2.0


class GroundTruthMotion:
    """Closed-form frame-1 to frame-t map of a phantom, plus its rasterized products."""

    def __init__(self, spec: PhantomSpec):
        self.spec = spec
        t = np.arange(1, spec.frames + 1, dtype=np.float64)
        self.profile = 1.0 - spec.amplitude * np.sin(np.pi * (t - 1.0) / spec.frames) ** 2
        self.mask = MyoMask(self._annulus())
        self.trajectory = self._rasterize()

    # -- radial maps ---------------------------------------------------------

    def _wall(self, radius: np.ndarray, s: float) -> np.ndarray:
        r_i = self.spec.inner_radius
        if self.spec.mode == "scale":
            return radius * s
        return np.sqrt((r_i * s) ** 2 + radius ** 2 - r_i ** 2)

    def _taper_weight(self, radius: np.ndarray) -> np.ndarray:
        u = (radius - self.spec.outer_radius) / self.spec.taper
        return 0.5 * (1.0 + np.cos(np.pi * u))

    def radius_forward(self, radius: np.ndarray, t: int) -> np.ndarray:
        """rho(R, t): where material at radius R sits in frame t."""
        s = self.profile[t - 1]
        r_i, r_o, m = self.spec.inner_radius, self.spec.outer_radius, self.spec.taper
        radius = np.asarray(radius, dtype=np.float64)
        shift = float(self._wall(np.array(r_o), s)) - r_o
        wall = np.where(radius >= r_i, radius, r_i)
        band = np.clip(radius, r_o, r_o + m)
        return np.select(
            [radius < r_i, radius <= r_o, radius < r_o + m],
            [radius * s, self._wall(wall, s), radius + shift * self._taper_weight(band)],
            default=radius,
        )

    def radius_inverse(self, rho: np.ndarray, t: int) -> np.ndarray:
        """R(rho, t), the exact inverse of `radius_forward`."""
        s = self.profile[t - 1]
        r_i, r_o, m = self.spec.inner_radius, self.spec.outer_radius, self.spec.taper
        rho = np.asarray(rho, dtype=np.float64)
        inner = r_i * s
        outer = float(self._wall(np.array(r_o), s))

        if self.spec.mode == "scale":
            wall = rho / s
        else:
            wall = np.sqrt(np.maximum(rho ** 2 - inner ** 2 + r_i ** 2, 0.0))

        # The taper map is strictly increasing on [r_o, r_o + m]; bisect it.
        in_band = (rho > outer) & (rho < r_o + m)
        lo = np.full(rho.shape, r_o)
        hi = np.full(rho.shape, r_o + m)
        if in_band.any():
            for _ in range(_BISECTION_STEPS):
                mid = 0.5 * (lo + hi)
                above = self.radius_forward(mid, t) > rho
                hi = np.where(above, mid, hi)
                lo = np.where(above, lo, mid)

        return np.select(
            [rho < inner, rho <= outer, in_band],
            [rho / s, wall, 0.5 * (lo + hi)],
            default=rho,
        )

    # -- point maps ----------------------------------------------------------

    def polar(self, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        cx, cy = self.spec.centre
        dx = np.asarray(xs, dtype=np.float64) - cx
        dy = np.asarray(ys, dtype=np.float64) - cy
        return dx, dy, np.hypot(dx, dy)

    def _remap(self, xs, ys, radius_map) -> Tuple[np.ndarray, np.ndarray]:
        cx, cy = self.spec.centre
        dx, dy, radius = self.polar(xs, ys)
        ratio = np.where(radius > 0, radius_map(radius) / np.where(radius > 0, radius, 1.0), 0.0)
        return cx + dx * ratio, cy + dy * ratio

    def forward(self, xs: np.ndarray, ys: np.ndarray, t: int) -> Tuple[np.ndarray, np.ndarray]:
        """Phi_t on 1-based (x, y) coordinates."""
        return self._remap(xs, ys, lambda r: self.radius_forward(r, t))

    def inverse(self, xs: np.ndarray, ys: np.ndarray, t: int) -> Tuple[np.ndarray, np.ndarray]:
        return self._remap(xs, ys, lambda r: self.radius_inverse(r, t))

    # -- rasterized products -------------------------------------------------

    def pixel_coords(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(
            np.arange(1, self.spec.width + 1, dtype=np.float64),
            np.arange(1, self.spec.height + 1, dtype=np.float64),
        )

    def _annulus(self) -> np.ndarray:
        xs, ys = self.pixel_coords()
        _, _, radius = self.polar(xs, ys)
        return (radius >= self.spec.inner_radius) & (radius <= self.spec.outer_radius)

    def _rasterize(self) -> TrajectoryField:
        xs, ys = self.pixel_coords()
        values = np.zeros((self.spec.frames, self.spec.height, self.spec.width, 2))
        for t in range(2, self.spec.frames + 1):
            px, py = self.forward(xs, ys, t)
            values[t - 1, ..., 0] = px - xs
            values[t - 1, ..., 1] = py - ys
        return TrajectoryField(values)

    def strain_at(self, radius: np.ndarray, t: int) -> Tuple[np.ndarray, np.ndarray]:
        """Analytic (E_rr, E_cc) for material radii inside the wall."""
        s = self.profile[t - 1]
        radius = np.asarray(radius, dtype=np.float64)
        if self.spec.mode == "scale":
            value = np.full(radius.shape, 0.5 * (s * s - 1.0))
            return value, value.copy()
        stretch_c = self._wall(radius, s) / radius
        stretch_r = 1.0 / stretch_c
        return 0.5 * (stretch_r ** 2 - 1.0), 0.5 * (stretch_c ** 2 - 1.0)

    def global_truth(self) -> Dict[str, np.ndarray]:
        """Mask-averaged analytic GRS and GCS per frame (dimensionless)."""
        xs, ys = self.pixel_coords()
        _, _, radius = self.polar(xs[self.mask.mask], ys[self.mask.mask])
        curves = {"GRS": np.zeros(self.spec.frames), "GCS": np.zeros(self.spec.frames)}
        for t in range(1, self.spec.frames + 1):
            e_rr, e_cc = self.strain_at(radius, t)
            curves["GRS"][t - 1] = e_rr.mean()
            curves["GCS"][t - 1] = e_cc.mean()
        return curves

    def boundary(self, which: str, t: int = 1, points: int = 64) -> np.ndarray:
        """(points, 2) 1-based samples of the endocardial or epicardial circle in frame t."""
        radii = {"endo": self.spec.inner_radius, "epi": self.spec.outer_radius}
        if which not in radii:
            raise PhantomError(f"boundary must be 'endo' or 'epi', got '{which}'")
        rho = float(self.radius_forward(np.array(radii[which]), t))
        theta = np.linspace(0.0, 2.0 * np.pi, points, endpoint=False)
        cx, cy = self.spec.centre
        return np.stack([cx + rho * np.cos(theta), cy + rho * np.sin(theta)], axis=-1)


def ground_truth_strain(motion: GroundTruthMotion, t: int) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic E_rr and E_cc maps for frame t, zero off the mask."""
    if not 1 <= t <= motion.spec.frames:
        raise PhantomError(f"frame {t} outside 1..{motion.spec.frames}")
    xs, ys = motion.pixel_coords()
    _, _, radius = motion.polar(xs, ys)
    e_rr = np.zeros(radius.shape)
    e_cc = np.zeros(radius.shape)
    inside = motion.mask.mask
    e_rr[inside], e_cc[inside] = motion.strain_at(radius[inside], t)
    return e_rr, e_cc


def _logistic(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def reference_texture(spec: PhantomSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Unscaled tissue intensity plus sinusoids at 1-based reference positions."""
    cx, cy = spec.centre
    dx, dy = xs - cx, ys - cy
    radius = np.hypot(dx, dy)
    w = spec.edge_width
    blood, myo, background = (spec.tissue[k] for k in ("blood", "myocardium", "background"))
    outer = _logistic((spec.outer_radius - radius) / w)
    inner = _logistic((spec.inner_radius - radius) / w)
    base = background + (myo - background) * outer + (blood - myo) * inner

    weight = spec.texture_weight
    membership = (
        weight["background"] * (1.0 - outer)
        + weight["myocardium"] * (outer - inner)
        + weight["blood"] * inner
    )
    pattern = np.zeros_like(radius)
    for (kx, ky), amplitude in spec.texture:
        pattern = pattern + amplitude * np.sin(kx * dx + ky * dy)
    return base + membership * pattern


def generate_phantom(spec: PhantomSpec) -> Tuple[CineSequence, GroundTruthMotion]:
    motion = GroundTruthMotion(spec)
    xs, ys = motion.pixel_coords()

    clean = np.empty((spec.frames, spec.height, spec.width))
    for t in range(1, spec.frames + 1):
        rx, ry = motion.inverse(xs, ys, t)
        clean[t - 1] = reference_texture(spec, rx, ry)

    # Scale by the reference frame so frame 1 is the normalized texture itself.
    low, high = float(clean[0].min()), float(clean[0].max())
    clean = (clean - low) / (high - low)

    grad = image_gradient(clean[0])
    strength = float(np.hypot(grad.dx, grad.dy)[motion.mask.mask].mean())
    if strength < _MIN_TEXTURE_GRADIENT:
        logger.warning(f"Phantom wall texture is nearly flat (mean gradient {strength:.2e})")

    rng = np.random.default_rng(spec.seed)
    data = clean + spec.noise * rng.standard_normal(clean.shape)
    logger.info(
        f"Phantom {spec.width}x{spec.height}x{spec.frames} ({spec.mode}, A={spec.amplitude}, "
        f"seed={spec.seed}); wall texture gradient {strength:.3f}"
    )
    return CineSequence(data, pixel_spacing=spec.pixel_spacing), motion


def wall_area(motion: GroundTruthMotion, t: int) -> float:
    """Area between the deformed inner and outer wall radii in frame t."""
    inner = float(motion.radius_forward(np.array(motion.spec.inner_radius), t))
    outer = float(motion.radius_forward(np.array(motion.spec.outer_radius), t))
    return math.pi * (outer ** 2 - inner ** 2)
