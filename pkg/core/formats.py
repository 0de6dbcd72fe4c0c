"""
On-disk formats: little-endian versioned binaries plus plain CSV.

    CSEQ  "CSEQ" u32 version, u32 N_x, N_y, N_t, f32 pixel spacing, f32 intensities
    DSP1  "DSP1" u32 version, u32 N_x, N_y, N_t, f32 (dx, dy) pairs
    MSK1  "MSK1" u32 version, u32 N_x, N_y, u8 mask
    SMP1  "SMP1" u32 version, u32 N_x, N_y, N_t, u32 channels, f32 values

Payloads are frame-major, then row-major (y outer, x inner). Parse errors
name the byte offset where the file went wrong. Every write is atomic.
"""
import csv
import io
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import FORMAT_VERSION
from core.evaluation import Contour, EvaluationError
from core.imaging import CineSequence
from core.optimizer import SolveTrace
from core.utils import atomic_write

PathLike = Union[str, Path]

_CSEQ = struct.Struct("<4sIIIIf")
_DSP1 = struct.Struct("<4sIIII")
_MSK1 = struct.Struct("<4sIII")
_SMP1 = struct.Struct("<4sIIIII")


class FormatError(ValueError):
    """A file that does not parse, or does not match its companions."""


# ---------------------------------------------------------------------------
# Binary helpers
# ---------------------------------------------------------------------------

def _read_header(raw: bytes, layout: struct.Struct, magic: bytes, path: PathLike) -> tuple:
    if len(raw) < layout.size:
        if raw[:4] != magic[: len(raw[:4])]:
            raise FormatError(f"{path}: bad magic at byte 0")
        raise FormatError(f"{path}: truncated header at byte {len(raw)}: expected {layout.size} bytes")
    fields = layout.unpack_from(raw)
    if fields[0] != magic:
        raise FormatError(f"{path}: bad magic at byte 0: expected {magic!r}, got {fields[0]!r}")
    if fields[1] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {fields[1]} at byte 4")
    return fields[2:]


def _read_payload(raw: bytes, offset: int, count: int, dtype: str, path: PathLike) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    expected = offset + count * itemsize
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated payload at byte {len(raw)}: expected {expected} bytes"
        )
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes at byte {expected}")
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    if values.dtype.kind == "f":
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise FormatError(f"{path}: non-finite value at byte {offset + int(bad[0]) * itemsize}")
    return values


def _dims(*dims: int) -> None:
    if any(d <= 0 for d in dims):
        raise FormatError(f"dimensions must be positive, got {dims}")


# ---------------------------------------------------------------------------
# CSEQ
# ---------------------------------------------------------------------------

def write_cseq(path: PathLike, seq: CineSequence) -> Path:
    header = _CSEQ.pack(b"CSEQ", FORMAT_VERSION, seq.width, seq.height, seq.frames, seq.pixel_spacing)
    return atomic_write(path, header + seq.data.astype("<f4").tobytes())


def read_cseq(path: PathLike) -> CineSequence:
    raw = Path(path).read_bytes()
    n_x, n_y, n_t, spacing = _read_header(raw, _CSEQ, b"CSEQ", path)
    _dims(n_x, n_y, n_t)
    values = _read_payload(raw, _CSEQ.size, n_x * n_y * n_t, "<f4", path)
    return CineSequence(values.reshape(n_t, n_y, n_x).astype(np.float64), pixel_spacing=float(spacing))


# ---------------------------------------------------------------------------
# DSP1
# ---------------------------------------------------------------------------

def write_dsp1(path: PathLike, field: np.ndarray) -> Path:
    """Store an (N_t, N_y, N_x, 2) displacement or trajectory field."""
    if field.ndim != 4 or field.shape[-1] != 2:
        raise FormatError(f"displacement field must be (N_t, N_y, N_x, 2), got {field.shape}")
    n_t, n_y, n_x, _ = field.shape
    header = _DSP1.pack(b"DSP1", FORMAT_VERSION, n_x, n_y, n_t)
    return atomic_write(path, header + field.astype("<f4").tobytes())


def read_dsp1(
    path: PathLike,
    grid: Optional[Tuple[int, int]] = None,
    frames: Optional[int] = None,
) -> np.ndarray:
    """Load a field, optionally checking it against a companion sequence's (N_x, N_y) and N_t."""
    raw = Path(path).read_bytes()
    n_x, n_y, n_t = _read_header(raw, _DSP1, b"DSP1", path)
    _dims(n_x, n_y, n_t)
    if grid is not None and (n_x, n_y) != tuple(grid):
        raise FormatError(f"{path}: field grid {n_x}x{n_y} differs from sequence grid {grid[0]}x{grid[1]}")
    if frames is not None and n_t != frames:
        raise FormatError(f"{path}: field has {n_t} frames, sequence has {frames}")
    values = _read_payload(raw, _DSP1.size, n_x * n_y * n_t * 2, "<f4", path)
    return values.reshape(n_t, n_y, n_x, 2).astype(np.float64)


# ---------------------------------------------------------------------------
# MSK1 / SMP1
# ---------------------------------------------------------------------------

def write_msk1(path: PathLike, mask: np.ndarray) -> Path:
    n_y, n_x = mask.shape
    header = _MSK1.pack(b"MSK1", FORMAT_VERSION, n_x, n_y)
    return atomic_write(path, header + np.asarray(mask, dtype=np.uint8).tobytes())


def read_msk1(path: PathLike, grid: Optional[Tuple[int, int]] = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    n_x, n_y = _read_header(raw, _MSK1, b"MSK1", path)
    _dims(n_x, n_y)
    if grid is not None and (n_x, n_y) != tuple(grid):
        raise FormatError(f"{path}: mask grid {n_x}x{n_y} differs from {grid[0]}x{grid[1]}")
    values = _read_payload(raw, _MSK1.size, n_x * n_y, "u1", path)
    if values.max(initial=0) > 1:
        bad = int(np.flatnonzero(values > 1)[0])
        raise FormatError(f"{path}: mask byte {values[bad]} at byte {_MSK1.size + bad} is not 0 or 1")
    return values.reshape(n_y, n_x).astype(bool)


def write_smp1(path: PathLike, channels: Sequence[np.ndarray]) -> Path:
    """Store float rasters shaped (N_t, N_y, N_x), one per channel."""
    stack = np.stack([np.asarray(c, dtype=np.float64) for c in channels])
    if stack.ndim != 4:
        raise FormatError(f"raster channels must be (N_t, N_y, N_x), got {stack.shape[1:]}")
    n_c, n_t, n_y, n_x = stack.shape
    header = _SMP1.pack(b"SMP1", FORMAT_VERSION, n_x, n_y, n_t, n_c)
    return atomic_write(path, header + stack.astype("<f4").tobytes())


def read_smp1(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    n_x, n_y, n_t, n_c = _read_header(raw, _SMP1, b"SMP1", path)
    _dims(n_x, n_y, n_t, n_c)
    values = _read_payload(raw, _SMP1.size, n_c * n_t * n_y * n_x, "<f4", path)
    return values.reshape(n_c, n_t, n_y, n_x).astype(np.float64)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _csv_text(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _number(value: float, digits: int = 6) -> str:
    return "" if not np.isfinite(value) else f"{value:.{digits}f}"


def _read_rows(path: PathLike, required: Sequence[str]) -> Tuple[List[str], List[Tuple[int, Dict[str, str]]]]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        columns = list(reader.fieldnames or [])
        missing = [c for c in required if c not in columns]
        if missing:
            raise FormatError(f"{path}: line 1: missing columns {missing}")
        rows = []
        for row in reader:
            if None in row or any(v is None for v in row.values()):
                raise FormatError(f"{path}: line {reader.line_num}: expected {len(columns)} fields")
            rows.append((reader.line_num, row))
    return columns, rows


def _parse_float(text: str, path: PathLike, line: int, allow_blank: bool = False) -> float:
    if allow_blank and text.strip() == "":
        return float("nan")
    try:
        value = float(text)
    except ValueError:
        raise FormatError(f"{path}: line {line}: '{text}' is not a number") from None
    if not np.isfinite(value):
        raise FormatError(f"{path}: line {line}: non-finite value '{text}'")
    return value


def write_contours(path: PathLike, contours: Sequence[Contour]) -> Path:
    rows = [
        (str(c.frame), _number(x), _number(y))
        for c in contours
        for x, y in c.points
    ]
    return atomic_write(path, _csv_text(("frame", "x", "y"), rows))


def read_contours(path: PathLike) -> List[Contour]:
    """One closed contour per distinct frame, in order of first appearance."""
    _, rows = _read_rows(path, ("frame", "x", "y"))
    if not rows:
        raise FormatError(f"{path}: no contour points")
    grouped: Dict[int, List[Tuple[float, float]]] = {}
    for line, row in rows:
        try:
            frame = int(row["frame"])
        except ValueError:
            raise FormatError(f"{path}: line {line}: frame '{row['frame']}' is not an integer") from None
        if frame < 1:
            raise FormatError(f"{path}: line {line}: frame must be >= 1")
        point = (_parse_float(row["x"], path, line), _parse_float(row["y"], path, line))
        grouped.setdefault(frame, []).append(point)
    contours = []
    for frame, points in grouped.items():
        try:
            contours.append(Contour(np.array(points), frame=frame, closed=True))
        except EvaluationError as e:
            raise FormatError(f"{path}: frame {frame}: {e}") from None
    return contours


def write_strain_csv(path: PathLike, curves: Dict[str, np.ndarray], percent: bool = True) -> Path:
    """One row per frame; dimensionless curves are written in percent. Missing values stay blank."""
    names = list(curves)
    lengths = {len(curves[n]) for n in names}
    if len(lengths) != 1:
        raise FormatError(f"strain curves have different lengths: {sorted(lengths)}")
    scale = 100.0 if percent else 1.0
    n_t = lengths.pop()
    rows = [
        [str(t + 1)] + [_number(scale * float(curves[n][t])) for n in names]
        for t in range(n_t)
    ]
    return atomic_write(path, _csv_text(["frame"] + names, rows))


def read_strain_csv(path: PathLike, frames: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Curves in percent keyed by column; blanks read back as NaN."""
    columns, rows = _read_rows(path, ("frame", "GRS", "GCS"))
    names = [c for c in columns if c != "frame"]
    curves = {n: np.empty(len(rows)) for n in names}
    for index, (line, row) in enumerate(rows):
        if row["frame"].strip() != str(index + 1):
            raise FormatError(f"{path}: line {line}: expected frame {index + 1}, got '{row['frame']}'")
        for name in names:
            curves[name][index] = _parse_float(row[name], path, line, allow_blank=name.startswith("seg_"))
    if frames is not None and len(rows) != frames:
        raise FormatError(f"{path}: {len(rows)} strain rows, expected {frames}")
    return curves


_TRACE_FIELDS = ("level", "iter", "cost", "dissim", "r_spatial", "r_temporal", "step", "gradnorm")


def write_trace_csv(path: PathLike, trace: SolveTrace) -> Path:
    with_pair = any(r.pair is not None for r in trace.records)
    header = (("pair",) if with_pair else ()) + _TRACE_FIELDS
    rows = []
    for r in trace.records:
        row = [str(r.level), str(r.iteration)] + [
            f"{v:.12g}" for v in (r.cost, r.dissimilarity, r.spatial, r.temporal, r.step, r.grad_norm)
        ]
        rows.append(([str(r.pair)] if with_pair else []) + row)
    return atomic_write(path, _csv_text(header, rows))


def write_report_csv(path: PathLike, rows: Sequence[Tuple[str, float]]) -> Path:
    return atomic_write(path, _csv_text(("metric", "value"), [(name, _number(v)) for name, v in rows]))
