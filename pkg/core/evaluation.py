"""
Accuracy metrics against a known or annotated truth.

Strain inputs are dimensionless; strain errors come back in strain points
(percent). Displacement errors come back in pixels and are scaled to mm with
the pixel spacing by the caller or by `MetricReport`.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.deform import TrajectoryField
from core.imaging import sample_frame


class EvaluationError(ValueError):
    """Grid mismatches, empty masks and degenerate contours."""


@dataclass(frozen=True)
class Contour:
    """Ordered 1-based (x, y) points of one boundary in one frame."""

    points: np.ndarray
    frame: int = 1
    closed: bool = True

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", points)
        if points.ndim != 2 or points.shape[1] != 2 or len(points) == 0:
            raise EvaluationError(f"contour points must be (K, 2), got shape {points.shape}")
        if self.closed and len(points) < 3:
            raise EvaluationError(f"a closed contour needs at least 3 points, got {len(points)}")

    def segments(self) -> np.ndarray:
        """(S, 2, 2) start and end points of each polyline edge."""
        ends = np.roll(self.points, -1, axis=0)
        segments = np.stack([self.points, ends], axis=1)
        return segments if self.closed else segments[:-1]


@dataclass
class MetricReport:
    pixel_spacing: float = 1.0
    end_systolic_frame: int = 1
    epe_es_px: float = 0.0
    epe_all_px: float = 0.0
    vse_es: Dict[str, float] = field(default_factory=dict)
    gse_es: Dict[str, float] = field(default_factory=dict)
    drift: Dict[str, float] = field(default_factory=dict)
    contour_distances: Dict[str, float] = field(default_factory=dict)

    @property
    def epe_es_mm(self) -> float:
        return self.epe_es_px * self.pixel_spacing

    @property
    def epe_all_mm(self) -> float:
        return self.epe_all_px * self.pixel_spacing

    def rows(self) -> List[Tuple[str, float]]:
        """Flat (metric, value) pairs in report order."""
        rows = [
            ("ES_frame", float(self.end_systolic_frame)),
            ("EPE_ES_px", self.epe_es_px),
            ("EPE_ES_mm", self.epe_es_mm),
            ("EPE_all_px", self.epe_all_px),
            ("EPE_all_mm", self.epe_all_mm),
        ]
        rows += [(f"VSE_ES_{name}", value) for name, value in self.vse_es.items()]
        rows += [(f"GSE_ES_{name}", value) for name, value in self.gse_es.items()]
        rows += [(f"drift_{name}", value) for name, value in self.drift.items()]
        rows += [(f"contour_{name}_mm", value) for name, value in self.contour_distances.items()]
        return rows


def _check_grid(est: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if est.shape != truth.shape:
        raise EvaluationError(f"estimate shape {est.shape} differs from truth shape {truth.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != est.shape[1:3]:
        raise EvaluationError(f"mask shape {mask.shape} differs from grid {est.shape[1:3]}")
    if not mask.any():
        raise EvaluationError("evaluation mask is empty")
    return mask


def epe_curve(est: TrajectoryField, truth: TrajectoryField, mask: np.ndarray) -> np.ndarray:
    """Mean endpoint error over the mask, one value per frame, in px."""
    mask = _check_grid(est.values, truth.values, mask)
    error = np.linalg.norm(est.values - truth.values, axis=-1)
    return error[:, mask].mean(axis=1)


def epe(est: TrajectoryField, truth: TrajectoryField, mask: np.ndarray, frame: Optional[int] = None) -> float:
    """Endpoint error in px at a 1-based frame, or over all frames when frame is None."""
    curve = epe_curve(est, truth, mask)
    if frame is None:
        return float(curve.mean())
    return float(curve[frame - 1])


def vse_curve(est_map: np.ndarray, truth_map: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean |strain difference| over the mask per frame, strain points."""
    mask = _check_grid(est_map, truth_map, mask)
    return 100.0 * np.abs(est_map - truth_map)[:, mask].mean(axis=1)


def vse(est_map: np.ndarray, truth_map: np.ndarray, mask: np.ndarray, frame: int) -> float:
    return float(vse_curve(est_map, truth_map, mask)[frame - 1])


def gse(est_curve: np.ndarray, truth_curve: np.ndarray, frame: int) -> float:
    """|global strain difference| at a 1-based frame, strain points."""
    return 100.0 * abs(float(est_curve[frame - 1]) - float(truth_curve[frame - 1]))


def drift(curve: np.ndarray) -> float:
    """Strain left over at the end of the cycle, strain points."""
    return 100.0 * abs(float(curve[-1]))


def end_systolic_frame(truth_curve: np.ndarray) -> int:
    """1-based frame of maximal |truth global strain|."""
    return int(np.argmax(np.abs(truth_curve))) + 1


def track_contour(contour: Contour, traj: TrajectoryField, frame: int) -> Contour:
    """Move frame-1 contour points through the bilinear-sampled trajectory of `frame`."""
    if not 1 <= frame <= traj.frames:
        raise EvaluationError(f"frame {frame} outside 1..{traj.frames}")
    xs = contour.points[:, 0] - 1.0
    ys = contour.points[:, 1] - 1.0
    step = traj.values[frame - 1]
    moved = contour.points + np.stack(
        [sample_frame(step[..., 0], xs, ys), sample_frame(step[..., 1], xs, ys)], axis=-1
    )
    return Contour(moved, frame=frame, closed=contour.closed)


def _point_to_polyline(points: np.ndarray, segments: np.ndarray) -> np.ndarray:
    start = segments[None, :, 0, :]
    edge = segments[None, :, 1, :] - start
    length2 = np.sum(edge * edge, axis=-1)
    rel = points[:, None, :] - start
    u = np.where(length2 > 0, np.sum(rel * edge, axis=-1) / np.where(length2 > 0, length2, 1.0), 0.0)
    nearest = start + np.clip(u, 0.0, 1.0)[..., None] * edge
    return np.linalg.norm(points[:, None, :] - nearest, axis=-1).min(axis=1)


def contour_distance(a: Contour, b: Contour, pixel_spacing: float = 1.0) -> float:
    """Symmetric mean point-to-polyline distance, in mm."""
    seg_a, seg_b = a.segments(), b.segments()
    if len(seg_a) == 0 or len(seg_b) == 0:
        raise EvaluationError("contour distance needs at least one edge per contour")
    forward = _point_to_polyline(a.points, seg_b).mean()
    backward = _point_to_polyline(b.points, seg_a).mean()
    return float(0.5 * (forward + backward) * pixel_spacing)
