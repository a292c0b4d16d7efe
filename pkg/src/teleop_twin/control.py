"""Edge-twin controller and real-plant emulator.

The controlled coordinates are the seven pose axes treated as independent
double integrators (task-space control; trajectory metrics are defined on
end-effector pose, so no kinematic chain is needed). The twin tracks its
target with a norm-capped spring-damper acceleration at 240 Hz; the plant
runs position PID at 1 kHz on the smoothed command stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import POSE_DIM
from .errors import ConfigError

SIM_HZ = 240.0
RENDER_MS = 16.0
PLANT_HZ = 1000.0
PLANT_DT = 1.0 / PLANT_HZ


def cap(u: np.ndarray, theta_th: float) -> np.ndarray:
    """Norm-limit u: unchanged below theta_th, rescaled to theta_th above."""
    if theta_th <= 0:
        raise ConfigError("theta_th must be positive")
    u = np.asarray(u, dtype=float)
    norm = float(np.sqrt(np.sum(u * u)))
    if norm < theta_th:
        return u.copy()
    return u * (theta_th / norm)


@dataclass(frozen=True)
class RmpParams:
    """Gains of the capped spring-damper acceleration policy."""

    kp: float = 57600.0
    kd: float = 240.0
    theta_th: float = 0.5

    def __post_init__(self):
        if self.kp <= 0 or self.kd < 0 or self.theta_th <= 0:
            raise ConfigError(f"invalid RMP params {self}")


def rmp_accel(q: np.ndarray, qdot: np.ndarray, target: np.ndarray, p: RmpParams) -> np.ndarray:
    """Desired acceleration kp*cap(target - q) - kd*qdot, cap over all axes."""
    err = np.asarray(target, dtype=float) - np.asarray(q, dtype=float)
    return p.kp * cap(err, p.theta_th) - p.kd * np.asarray(qdot, dtype=float)


@dataclass
class SmootherState:
    """Command interpolator emitting every t_co_ms.

    While the newest upstream command is fresher than the blend window the
    output eases from the previous command toward it with weight 1-alpha,
    alpha squaring after each emission; a new upstream command resets alpha.
    A stale upstream (no fresh command inside the window) holds the last
    output, freezing motion during network gaps.
    """

    alpha0: float = 0.5
    t_co_ms: float = 8.0
    blend_window_ms: float = 16.0
    alpha: float = field(init=False)
    previous: np.ndarray | None = field(init=False, default=None)
    incoming_t_us: int | None = field(init=False, default=None)

    def __post_init__(self):
        if not (0.0 < self.alpha0 <= 1.0):
            raise ConfigError("alpha0 must be in (0, 1]")
        self.alpha = self.alpha0

    def note_incoming(self, t_us: int) -> None:
        """Record arrival of a new upstream command; resets the blend weight."""
        self.incoming_t_us = t_us
        self.alpha = self.alpha0


def smooth_command(st: SmootherState, incoming: np.ndarray, now_us: int) -> np.ndarray:
    """One emission of the interpolated command stream."""
    incoming = np.asarray(incoming, dtype=float)
    if st.previous is None:
        st.previous = incoming.copy()
        return st.previous.copy()
    fresh = (
        st.incoming_t_us is not None
        and (now_us - st.incoming_t_us) < st.blend_window_ms * 1000.0
    )
    if fresh:
        out = st.alpha * st.previous + (1.0 - st.alpha) * incoming
        st.alpha = st.alpha * st.alpha
        st.previous = out
    return st.previous.copy()


@dataclass
class TwinState:
    """Virtual-arm state: per-axis position/velocity plus tick bookkeeping."""

    q: np.ndarray
    v: np.ndarray
    ticks: int = 0
    last_frame_id: int = 0

    @classmethod
    def at_pose(cls, pose7: np.ndarray) -> "TwinState":
        return cls(q=np.asarray(pose7, dtype=float).copy(), v=np.zeros(POSE_DIM))

    def copy_pose(self) -> np.ndarray:
        return self.q.copy()


def step_sim(ts: TwinState, target: np.ndarray, params: RmpParams, dt: float) -> None:
    """One semi-implicit Euler step of the capped spring-damper twin."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    kernels.spring_track(
        ts.q, ts.v, np.asarray(target, dtype=float),
        params.kp, params.kd, params.theta_th, dt, 1, True,
    )
    ts.ticks += 1


@dataclass(frozen=True)
class FrameState:
    """Snapshot emitted on the render grid and streamed to the operator."""

    frame_id: int
    t_us: int
    pose7: np.ndarray


def render_tick(ts: TwinState, now_us: int) -> FrameState:
    """Snapshot the twin pose; frame ids increase strictly."""
    ts.last_frame_id += 1
    return FrameState(frame_id=ts.last_frame_id, t_us=now_us, pose7=ts.copy_pose())


@dataclass(frozen=True)
class PidGains:
    """Plant position-PID gains; output acts as acceleration."""

    kp: float = 3600.0
    ki: float = 800.0
    kd: float = 120.0
    integral_clamp: float = 0.5 / 800.0  # theta_th / ki: windup guard

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0 or self.kd < 0:
            raise ConfigError("PID gains must be non-negative")


def pid_step(
    g: PidGains, error: float, integral: float, prev_error: float, dt: float
) -> tuple[float, float]:
    """Scalar PID update: trapezoidal clamped integral, backward-difference
    derivative. Returns (u, updated integral)."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    integral = integral + 0.5 * dt * (error + prev_error)
    if integral > g.integral_clamp:
        integral = g.integral_clamp
    elif integral < -g.integral_clamp:
        integral = -g.integral_clamp
    deriv = (error - prev_error) / dt
    u = g.kp * error + g.ki * integral + g.kd * deriv
    return u, integral


@dataclass
class PlantState:
    """Emulated robotic arm: PID-tracked double integrator per axis."""

    q: np.ndarray
    v: np.ndarray
    integ: np.ndarray
    prev_err: np.ndarray
    setpoint: np.ndarray
    steps: int = 0

    @classmethod
    def at_pose(cls, pose7: np.ndarray) -> "PlantState":
        p = np.asarray(pose7, dtype=float).copy()
        return cls(
            q=p.copy(),
            v=np.zeros(POSE_DIM),
            integ=np.zeros(POSE_DIM),
            prev_err=np.zeros(POSE_DIM),
            setpoint=p.copy(),
        )

    def copy_pose(self) -> np.ndarray:
        return self.q.copy()


def plant_step(ps: PlantState, gains: PidGains, dt: float = PLANT_DT, n_steps: int = 1) -> None:
    """Advance the plant n_steps of dt under the current setpoint."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if n_steps <= 0:
        return
    kernels.pid_track(
        ps.q, ps.v, ps.setpoint,
        gains.kp, gains.ki, gains.kd,
        ps.integ, ps.prev_err, gains.integral_clamp,
        dt, n_steps, True,
    )
    ps.steps += n_steps


@dataclass
class SafetyGuard:
    """Freezes target advance while plant feedback diverges too far.

    Trips when the position distance between the incoming target and the
    latest plant feedback exceeds radius; releases at radius/2.
    """

    radius: float = 0.05
    frozen: bool = False
    held: np.ndarray | None = None

    def apply(self, target7: np.ndarray, sigma_r_pos: np.ndarray | None) -> np.ndarray:
        target7 = np.asarray(target7, dtype=float)
        if sigma_r_pos is None:
            self.held = target7.copy()
            return target7
        div = float(np.linalg.norm(target7[:3] - sigma_r_pos[:3]))
        if self.frozen:
            if div < self.radius / 2.0:
                self.frozen = False
        elif div > self.radius:
            self.frozen = True
        if self.frozen and self.held is not None:
            return self.held.copy()
        self.held = target7.copy()
        return target7


def synthesize_control(
    pred_pose7: np.ndarray,
    wmap,
    guard: SafetyGuard,
    sigma_r_pos: np.ndarray | None,
) -> np.ndarray:
    """Map a predicted operator pose to the seven axis targets.

    Applies the workspace map, then the safety guard against the latest
    plant feedback snapshot.
    """
    target = wmap.map_array(np.asarray(pred_pose7, dtype=float))
    return guard.apply(target, sigma_r_pos)
