"""Pose sources: parametric shape generators, session recording, live input.

The four calibration shapes (circle, square, pentagram, triangle) plus the
held-out figure-eight are traced at constant speed along their curve, in a
plane given by the shape's orientation quaternion, with the orientation
held fixed along the path. Sessions are recorded/replayed as CSV.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Pose, normalize_quaternion, quat_to_matrix
from .errors import ConfigError, ParseError

SHAPE_KINDS = ("circle", "square", "pentagram", "triangle", "figure_eight")

#: Default drawing speed along the curve, m/s. Slow deliberate tracing in
#: the style of precision surface-following; also the regime where a 1 s
#: forecast of a polyline with corners stays sub-centimeter.
DEFAULT_SPEED = 0.012

#: Default circumradius of the calibration shapes, m.
DEFAULT_RADIUS = 0.1


def _polyline_vertices(kind: str) -> np.ndarray:
    """Unit-circumradius vertex loop in the local xy-plane."""
    if kind == "square":
        ang = np.deg2rad([45.0, 135.0, 225.0, 315.0])
    elif kind == "triangle":
        ang = np.deg2rad([90.0, 210.0, 330.0])
    elif kind == "pentagram":
        # {5/2} star polygon: visit every second vertex of a pentagon
        ang = np.deg2rad([90.0 + 144.0 * k for k in range(5)])
    else:
        raise ConfigError(f"not a polyline shape: {kind}")
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def shape_path_length(kind: str, radius: float) -> float:
    """Arc length of one full traversal of the closed curve."""
    if kind == "circle":
        return 2.0 * math.pi * radius
    if kind == "figure_eight":
        # lemniscate of Gerono x=sin(2u), y=sin(u) scaled to the radius;
        # quadrature once at import scale is cheap enough to do directly
        u = np.linspace(0.0, 2.0 * math.pi, 20001)
        x = radius * np.sin(2.0 * u) / 2.0
        y = radius * np.sin(u)
        return float(np.sum(np.hypot(np.diff(x), np.diff(y))))
    verts = _polyline_vertices(kind) * radius
    seg = np.diff(np.vstack([verts, verts[:1]]), axis=0)
    return float(np.sum(np.hypot(seg[:, 0], seg[:, 1])))


@dataclass(frozen=True)
class ShapeSpec:
    """Closed planar curve traced periodically at constant speed."""

    kind: str
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = DEFAULT_RADIUS
    period_ms: float = 0.0  # 0 means derive from DEFAULT_SPEED
    orientation: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0])
    )
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        if self.radius <= 0.0:
            raise ConfigError("radius must be positive")
        object.__setattr__(
            self, "center", np.asarray(self.center, dtype=float).reshape(3)
        )
        object.__setattr__(
            self, "orientation", normalize_quaternion(self.orientation)
        )
        if self.period_ms == 0.0:
            derived = 1000.0 * shape_path_length(self.kind, self.radius) / DEFAULT_SPEED
            object.__setattr__(self, "period_ms", derived)
        if self.period_ms <= 0.0:
            raise ConfigError("period must be positive")

    @property
    def speed(self) -> float:
        """Tracing speed along the curve, m/s."""
        return shape_path_length(self.kind, self.radius) / (self.period_ms / 1000.0)


def _local_xy(shape: ShapeSpec, u: float) -> tuple[float, float]:
    """Point on the unit-parameter curve, u in [0, 1) is path fraction."""
    if shape.kind == "circle":
        a = 2.0 * math.pi * u
        return math.cos(a), math.sin(a)
    if shape.kind == "figure_eight":
        # arc-length parametrization via a cached lookup table
        tab = _figure_eight_table()
        a = np.interp(u, tab[0], tab[1])
        return math.sin(2.0 * a) / 2.0, math.sin(a)
    verts = _polyline_vertices(shape.kind)
    n = len(verts)
    seg_len = np.array(
        [np.linalg.norm(verts[(i + 1) % n] - verts[i]) for i in range(n)]
    )
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = u * cum[-1]
    i = min(int(np.searchsorted(cum, s, side="right")) - 1, n - 1)
    frac = (s - cum[i]) / seg_len[i]
    pt = verts[i] + frac * (verts[(i + 1) % n] - verts[i])
    return float(pt[0]), float(pt[1])


_FIG8_TABLE: tuple[np.ndarray, np.ndarray] | None = None


def _figure_eight_table() -> tuple[np.ndarray, np.ndarray]:
    global _FIG8_TABLE
    if _FIG8_TABLE is None:
        u = np.linspace(0.0, 2.0 * math.pi, 4001)
        x = np.sin(2.0 * u) / 2.0
        y = np.sin(u)
        s = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(x), np.diff(y)))])
        _FIG8_TABLE = (s / s[-1], u)
    return _FIG8_TABLE


def generate_array(shape: ShapeSpec, t_ms: float) -> np.ndarray:
    """Pose 7-vector on the curve at time t (ms); period-periodic, C0."""
    if t_ms < 0:
        raise ValueError("t must be non-negative")
    u = (t_ms / shape.period_ms + shape.phase / (2.0 * math.pi)) % 1.0
    x, y = _local_xy(shape, u)
    R = quat_to_matrix(shape.orientation)
    pos = shape.center + R @ np.array([x * shape.radius, y * shape.radius, 0.0])
    out = np.empty(7)
    out[:3] = pos
    out[3:7] = shape.orientation
    return out


def generate(shape: ShapeSpec, t_ms: float) -> Pose:
    return Pose.from_array(generate_array(shape, t_ms))


@dataclass
class Session:
    """A recorded operator run: target poses and optional actual poses."""

    rate_hz: float
    t_ms: np.ndarray  # (N,)
    target: np.ndarray  # (N, 7)
    actual: np.ndarray | None = None  # (N, 7) when present

    def __post_init__(self):
        self.t_ms = np.asarray(self.t_ms, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        if self.actual is not None:
            self.actual = np.asarray(self.actual, dtype=float)
        if len(self.t_ms) > 1 and not np.all(np.diff(self.t_ms) > 0):
            raise ConfigError("session timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t_ms)


def sample_grid_us(rate_hz: float, duration_ms: float) -> np.ndarray:
    """Integer-microsecond sampling instants k/rate for k < duration*rate/1000."""
    n = int(duration_ms * rate_hz / 1000.0)
    return np.array([round(k * 1_000_000 / rate_hz) for k in range(n)], dtype=np.int64)


def sample_stream(shape: ShapeSpec, rate_hz: float = 120.0, duration_ms: float = 1000.0) -> Session:
    """Sample the generator on the exact rate grid for the given duration."""
    if rate_hz <= 0:
        raise ConfigError("rate must be positive")
    grid = sample_grid_us(rate_hz, duration_ms)
    t_ms = grid / 1000.0
    target = np.array([generate_array(shape, t) for t in t_ms]).reshape(-1, 7)
    return Session(rate_hz=rate_hz, t_ms=t_ms, target=target)


_TARGET_COLS = ["tx", "ty", "tz", "tqx", "tqy", "tqz", "tqw"]
_ACTUAL_COLS = ["ax", "ay", "az", "aqx", "aqy", "aqz", "aqw"]


def record(session: Session, path) -> None:
    """Write a session as CSV: t_ms, target columns, optional actual columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["t_ms"] + _TARGET_COLS + (_ACTUAL_COLS if session.actual is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(session)):
            row = [f"{session.t_ms[i]:.9g}"]
            row += [f"{v:.9g}" for v in session.target[i]]
            if session.actual is not None:
                row += [f"{v:.9g}" for v in session.actual[i]]
            w.writerow(row)


def load(path) -> Session:
    """Read a session CSV written by record(); validates the time grid."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        expected_t = ["t_ms"] + _TARGET_COLS
        if header[: len(expected_t)] != expected_t:
            raise ParseError(f"unexpected header {header!r}", line=1)
        has_actual = header[len(expected_t):] == _ACTUAL_COLS
        if not has_actual and len(header) != len(expected_t):
            raise ParseError(f"unexpected header {header!r}", line=1)
        t, tgt, act = [], [], []
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise ParseError(str(exc), line=ln) from None
            if len(vals) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(vals)}", line=ln
                )
            if t and vals[0] <= t[-1]:
                raise ParseError(
                    f"non-monotone timestamp {vals[0]} after {t[-1]}", line=ln
                )
            t.append(vals[0])
            tgt.append(vals[1:8])
            if has_actual:
                act.append(vals[8:15])
    t_arr = np.array(t)
    if len(t_arr) > 1:
        rate = 1000.0 / float(np.median(np.diff(t_arr)))
    else:
        rate = 0.0
    return Session(
        rate_hz=rate,
        t_ms=t_arr,
        target=np.array(tgt).reshape(-1, 7),
        actual=np.array(act).reshape(-1, 7) if has_actual else None,
    )


def corpus_path(root, kind: str, run_id: int) -> Path:
    """Directory convention for recorded corpora: corpus/<shape>/<run_id>.csv."""
    return Path(root) / kind / f"{run_id:04d}.csv"


class LiveInputAdapter:
    """Single-producer pose queue fed by the network bridge.

    The pipeline reads the newest pose at or before each sampling instant;
    poses must be pushed with non-decreasing timestamps.
    """

    def __init__(self):
        self._t_us: list[int] = []
        self._poses: list[np.ndarray] = []
        self._closed = False

    def push(self, t_us: int, pose7: np.ndarray) -> None:
        if self._t_us and t_us < self._t_us[-1]:
            raise ValueError("live input timestamps must be non-decreasing")
        self._t_us.append(int(t_us))
        self._poses.append(np.asarray(pose7, dtype=float).copy())

    def close(self) -> None:
        self._closed = True

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def latest_t_us(self) -> int | None:
        return self._t_us[-1] if self._t_us else None

    def pose_at(self, t_us: int) -> np.ndarray | None:
        """Newest pose with timestamp <= t_us, or None if none yet."""
        import bisect

        i = bisect.bisect_right(self._t_us, t_us) - 1
        if i < 0:
            return None
        return self._poses[i]
