"""Domain types shared by every pipeline stage.

Poses are 7-vectors: Cartesian position in meters followed by an
orientation quaternion (x, y, z, w). Quaternions are kept unit-norm and
sign-canonicalized (w >= 0) so that element-wise comparisons between two
pose streams are well defined despite the quaternion double cover.

Time is integer microseconds throughout the simulator; the millisecond
values quoted in configs are converted once at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateQuaternion

US_PER_MS = 1000
POSE_DIM = 7


def ms_to_us(ms: float) -> int:
    return int(round(ms * US_PER_MS))


def us_to_ms(us: int) -> float:
    return us / US_PER_MS


def normalize_quaternion(q) -> np.ndarray:
    """Scale q to unit norm and flip sign so qw >= 0.

    q is (x, y, z, w). Raises DegenerateQuaternion when the norm is below
    1e-12 and the direction is therefore meaningless.
    """
    q = np.asarray(q, dtype=float)
    norm = math.sqrt(float(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]))
    if norm <= 1e-12:
        raise DegenerateQuaternion(f"quaternion norm {norm:.3e} too small")
    out = q / norm
    if out[3] < 0.0:
        out = -out
    return out


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (x, y, z, w)."""
    x, y, z, w = (float(v) for v in q)
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Quaternion (x, y, z, w) of a rotation matrix, sign-canonicalized."""
    R = np.asarray(R, dtype=float)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return normalize_quaternion((x, y, z, w))


def canonicalize_quat_block(p7: np.ndarray) -> np.ndarray:
    """Renormalize the quaternion block of a 7-vector in place and return it."""
    p7[3:7] = normalize_quaternion(p7[3:7])
    return p7


@dataclass(frozen=True)
class Pose:
    """Operator/end-effector pose: position (m) + unit quaternion."""

    lx: float
    ly: float
    lz: float
    qx: float
    qy: float
    qz: float
    qw: float

    def __post_init__(self):
        vals = (self.lx, self.ly, self.lz, self.qx, self.qy, self.qz, self.qw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose component in {vals}")
        q = normalize_quaternion((self.qx, self.qy, self.qz, self.qw))
        object.__setattr__(self, "qx", float(q[0]))
        object.__setattr__(self, "qy", float(q[1]))
        object.__setattr__(self, "qz", float(q[2]))
        object.__setattr__(self, "qw", float(q[3]))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0)

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = np.asarray(a, dtype=float)
        return cls(*(float(v) for v in a[:POSE_DIM]))

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.lx, self.ly, self.lz, self.qx, self.qy, self.qz, self.qw]
        )

    @property
    def position(self) -> np.ndarray:
        return np.array([self.lx, self.ly, self.lz])

    @property
    def quaternion(self) -> np.ndarray:
        return np.array([self.qx, self.qy, self.qz, self.qw])


def _check_rotation(R: np.ndarray, name: str) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ConfigError(f"{name} must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
        raise ConfigError(f"{name} is not orthogonal within 1e-9")
    if np.linalg.det(R) < 0.0:
        raise ConfigError(f"{name} is a reflection (det < 0)")
    return R


@dataclass(frozen=True)
class WorkspaceMap:
    """Affine input-to-robot coordinate map plus an orientation adjustment.

    position' = s * Rp * position + d, with s a positive diagonal scaling;
    orientation' = quaternion of (Ro * Ri) where Ri is the rotation matrix
    of the input quaternion.
    """

    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation_adjust: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=float).reshape(3)
        if np.any(s <= 0.0):
            raise ConfigError(f"scale entries must be positive, got {s}")
        object.__setattr__(self, "scale", s)
        object.__setattr__(
            self, "rotation", _check_rotation(self.rotation, "rotation")
        )
        object.__setattr__(
            self,
            "translation",
            np.asarray(self.translation, dtype=float).reshape(3),
        )
        object.__setattr__(
            self,
            "orientation_adjust",
            _check_rotation(self.orientation_adjust, "orientation_adjust"),
        )
        trivial = bool(
            np.all(self.orientation_adjust == np.eye(3))
            and np.all(self.rotation == np.eye(3))
        )
        object.__setattr__(self, "_trivial_rotation", trivial)

    @classmethod
    def identity(cls) -> "WorkspaceMap":
        return cls()

    def map_array(self, p7: np.ndarray) -> np.ndarray:
        """Map a raw 7-vector pose into robot workspace coordinates."""
        p7 = np.asarray(p7, dtype=float)
        if self._trivial_rotation:
            out = p7.copy()
            out[:3] = self.scale * p7[:3] + self.translation
            out[3:7] = normalize_quaternion(p7[3:7])
            return out
        pos = self.scale * (self.rotation @ p7[:3]) + self.translation
        Ri = quat_to_matrix(p7[3:7])
        q = matrix_to_quat(self.orientation_adjust @ Ri)
        return np.concatenate([pos, q])


def map_workspace(p: Pose, m: WorkspaceMap) -> Pose:
    """Apply a WorkspaceMap to a Pose (Pose-level convenience wrapper)."""
    return Pose.from_array(m.map_array(p.to_array()))


@dataclass(frozen=True)
class NormalizationBounds:
    """Per-axis min/max for mapping pose components onto [-1, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(POSE_DIM)
        hi = np.asarray(self.hi, dtype=float).reshape(POSE_DIM)
        if not np.all(lo < hi):
            raise ConfigError("normalization bounds require min < max per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def default(cls) -> "NormalizationBounds":
        lo = np.array([-0.15, -0.15, -0.05, -1.0, -1.0, -1.0, -1.0])
        hi = np.array([0.15, 0.15, 0.05, 1.0, 1.0, 1.0, 1.0])
        return cls(lo, hi)

    def normalize(self, p7: np.ndarray) -> np.ndarray:
        """Affine map of each axis from [lo, hi] to [-1, 1], clamped."""
        p7 = np.asarray(p7, dtype=float)
        out = 2.0 * (p7 - self.lo) / (self.hi - self.lo) - 1.0
        return np.clip(out, -1.0, 1.0)

    def denormalize(self, n7: np.ndarray) -> np.ndarray:
        n7 = np.asarray(n7, dtype=float)
        return self.lo + (n7 + 1.0) * (self.hi - self.lo) / 2.0


def minmax_normalize(p: Pose, b: NormalizationBounds) -> np.ndarray:
    return b.normalize(p.to_array())


class VirtualClock:
    """Monotone microsecond clock owned by the event scheduler.

    In virtual mode time advances only via advance_to(); realtime mode is
    handled by the serving layer, which sleeps between events and feeds
    wall-clock-derived targets into the same interface.
    """

    __slots__ = ("now_us", "mode")

    def __init__(self, mode: str = "virtual"):
        if mode not in ("virtual", "realtime"):
            raise ConfigError(f"unknown clock mode {mode!r}")
        self.now_us = 0
        self.mode = mode

    @property
    def now_ms(self) -> float:
        return us_to_ms(self.now_us)

    def advance_to(self, t_us: int) -> None:
        if t_us < self.now_us:
            raise ValueError(
                f"clock may not run backwards: {t_us} < {self.now_us}"
            )
        self.now_us = t_us
