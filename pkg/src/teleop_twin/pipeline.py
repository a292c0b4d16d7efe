"""Event-driven assembly of the full teleoperation loop.

One Pipeline instance owns the virtual clock, the four delay channels, the
operator stage (sampling, prediction, horizon decisions), the edge stage
(twin control synthesis, simulation ticks, rendering, command smoothing),
and the plant stage (command ingestion, PID tracking, feedback). All
randomness flows from one seed through named SeedSequence spawns, and all
events are totally ordered by (time, insertion), so runs are
bit-reproducible.

Timeline stamps follow the slotted-information-flow reading: a prediction
packet is born at the sampling instant (t1), completes control at the
instant the plant starts executing the command derived from it (t9), and
completes the visual loop when its frame is displayed (t10).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

import numpy as np

from .control import (
    PLANT_DT,
    FrameState,
    PidGains,
    PlantState,
    RmpParams,
    SafetyGuard,
    SmootherState,
    TwinState,
    plant_step,
    render_tick,
    smooth_command,
    step_sim,
    synthesize_control,
)
from .core import (
    POSE_DIM,
    NormalizationBounds,
    VirtualClock,
    WorkspaceMap,
    canonicalize_quat_block,
    ms_to_us,
)
from .errors import ConfigError
from .metrics import EpisodeRecord, MetricWeights
from .network import DelayChannel, DelaySpec, LatencyMeasurement, StageServer, TimedPacket
from .operator import LiveInputAdapter, ShapeSpec, generate_array
from .predictor import OnlinePredictor


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a single episode needs besides the pose source and policy."""

    # cadences
    sample_hz: float = 120.0
    decision_hz: float = 30.0
    sim_hz: float = 240.0
    render_ms: float = 16.0
    plant_hz: float = 1000.0
    t_co_ms: float = 8.0
    feedback_ms: float = 16.0
    # processing budgets
    predictor_proc_ms: float = 1.0
    edge_service_ms: float = 2.0
    plant_service_ms: float = 1.0
    display_proc_ms: float = 16.0
    # transport
    delay: DelaySpec = DelaySpec.constant(0.0)
    delay_feedback: DelaySpec | None = None  # None: same spec as forward
    # control
    rmp: RmpParams = RmpParams()
    pid: PidGains = PidGains()
    smoother_alpha0: float = 0.3
    guard_radius_m: float = 0.05
    # predictor
    arma_p: int = 4
    arma_q: int = 1
    window_ms: float = 4000.0
    refit_ms: float = 250.0
    h_max_ms: float = 1000.0
    # operator / workspace
    sensor_noise_m: float = 1e-5
    workspace_scale: float = 0.5
    workspace_offset: tuple[float, float, float] = (0.4, 0.0, 0.3)
    # episode
    episode_ms: float = 20000.0
    warmup_ms: float = 4500.0
    weights: MetricWeights = MetricWeights()

    def wmap(self) -> WorkspaceMap:
        return WorkspaceMap(
            scale=np.full(3, self.workspace_scale),
            translation=np.asarray(self.workspace_offset),
        )

    def bounds(self) -> NormalizationBounds:
        return NormalizationBounds.default()

    def expected_visual_budget_ms(self) -> float:
        """Configured-delay-plus-processing budget for the visual loop mean.

        A packet's origin stamp propagates to frames as soon as its edge
        service completes, so the grid-alignment term is half the sampling
        period (origin refresh staleness at the render instant), not half
        the render period.
        """
        refresh_wait = 0.5 * 1000.0 / self.sample_hz
        return (
            self.predictor_proc_ms
            + 2.0 * self.delay.nominal_mean_ms
            + self.edge_service_ms
            + refresh_wait
            + self.display_proc_ms
        )

    def expected_control_budget_ms(self) -> float:
        refresh_wait = 0.5 * 1000.0 / self.sample_hz
        return (
            self.predictor_proc_ms
            + 2.0 * self.delay.nominal_mean_ms
            + self.edge_service_ms
            + refresh_wait
            + self.plant_service_ms
        )


@dataclass
class PolicyAction:
    """One horizon decision with the sampling info PPO needs."""

    h_r_ms: float
    h_v_ms: float
    bin_r: int = 0
    bin_v: int = 0
    logp_r: float = 0.0
    logp_v: float = 0.0
    value: float = 0.0


@dataclass
class StepSample:
    """Per-decision rollout entry."""

    state: np.ndarray
    action: PolicyAction
    reward: float = 0.0


class _PredPayload:
    __slots__ = ("p_r", "p_v", "h_r_ms", "h_v_ms")

    def __init__(self, p_r, p_v, h_r_ms, h_v_ms):
        self.p_r = p_r
        self.p_v = p_v
        self.h_r_ms = h_r_ms
        self.h_v_ms = h_v_ms


class _CmdPayload:
    __slots__ = ("cmd",)

    def __init__(self, cmd):
        self.cmd = cmd


class _FramePayload:
    __slots__ = ("frame", "control_echoes")

    def __init__(self, frame: FrameState, control_echoes):
        self.frame = frame
        self.control_echoes = control_echoes


class _FeedbackPayload:
    __slots__ = ("pose", "echoes")

    def __init__(self, pose, echoes):
        self.pose = pose
        self.echoes = echoes


class Scheduler:
    """Deterministic event queue over the virtual clock."""

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self._heap: list = []
        self._seq = 0

    @property
    def now_us(self) -> int:
        return self.clock.now_us

    def at(self, t_us: int, fn, *args) -> None:
        if t_us < self.clock.now_us:
            raise ValueError(f"cannot schedule in the past: {t_us} < {self.clock.now_us}")
        heapq.heappush(self._heap, (int(t_us), self._seq, fn, args))
        self._seq += 1

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def run_next(self) -> bool:
        if not self._heap:
            return False
        t, _, fn, args = heapq.heappop(self._heap)
        self.clock.advance_to(t)
        fn(*args)
        return True

    def run_until(self, t_end_us: int) -> None:
        while self._heap and self._heap[0][0] <= t_end_us:
            self.run_next()
        self.clock.advance_to(max(self.clock.now_us, t_end_us))


class ScriptedSource:
    """Pose source backed by a shape generator."""

    def __init__(self, shape: ShapeSpec):
        self.shape = shape

    def pose_at(self, t_us: int) -> np.ndarray:
        return generate_array(self.shape, t_us / 1000.0)


class LiveSource:
    """Pose source backed by a LiveInputAdapter (console sessions)."""

    def __init__(self, adapter: LiveInputAdapter, fallback: np.ndarray | None = None):
        self.adapter = adapter
        self.fallback = fallback if fallback is not None else np.array(
            [0, 0, 0, 0, 0, 0, 1.0]
        )

    def pose_at(self, t_us: int) -> np.ndarray:
        p = self.adapter.pose_at(t_us)
        return self.fallback.copy() if p is None else p


class Pipeline:
    """One end-to-end episode on the virtual clock."""

    def __init__(self, cfg: PipelineConfig, source, policy, seed: int):
        self.cfg = cfg
        self.source = source
        self.policy = policy
        self.seed = seed
        self.clock = VirtualClock("virtual")
        self.sched = Scheduler(self.clock)
        ss = np.random.SeedSequence(seed)
        (s_sensor, s_oe, s_ep, s_pe, s_eo, s_pol) = ss.spawn(6)
        self.rng_sensor = np.random.default_rng(s_sensor)
        self.rng_policy = np.random.default_rng(s_pol)

        self.wmap = cfg.wmap()
        self.bounds = cfg.bounds()
        self.lat = LatencyMeasurement()
        self.predictor = OnlinePredictor(
            rate_hz=cfg.sample_hz,
            window_ms=cfg.window_ms,
            refit_ms=cfg.refit_ms,
            p=cfg.arma_p,
            q=cfg.arma_q,
            h_max_ms=cfg.h_max_ms,
        )

        fb_spec = cfg.delay_feedback if cfg.delay_feedback is not None else cfg.delay
        self.ch_oe = DelayChannel(cfg.delay, self.sched, self._edge_ingress, np.random.default_rng(s_oe), "op->edge")
        self.ch_ep = DelayChannel(cfg.delay, self.sched, self._plant_ingress, np.random.default_rng(s_ep), "edge->plant")
        self.ch_pe = DelayChannel(fb_spec, self.sched, self._edge_feedback, np.random.default_rng(s_pe), "plant->edge")
        self.ch_eo = DelayChannel(fb_spec, self.sched, self._operator_ingress, np.random.default_rng(s_eo), "edge->op")

        self.edge_server = StageServer(
            self.sched, ms_to_us(cfg.edge_service_ms), self._edge_process, "edge"
        )
        self.plant_server = StageServer(
            self.sched, ms_to_us(cfg.plant_service_ms), self._plant_apply, "plant"
        )

        self.visual_twin: TwinState | None = None
        self.control_twin: TwinState | None = None
        self.visual_target = np.zeros(POSE_DIM)
        self.control_target = np.zeros(POSE_DIM)
        self.visual_origin_us = 0
        self.control_origin_us = 0
        self.guard = SafetyGuard(radius=cfg.guard_radius_m)
        self.smoother = SmootherState(
            alpha0=cfg.smoother_alpha0,
            t_co_ms=cfg.t_co_ms,
            blend_window_ms=2.0 * cfg.t_co_ms,
        )
        self.sigma_r: np.ndarray | None = None
        self.pending_echoes: list[tuple[int, int]] = []

        self.plant: PlantState | None = None
        self.plant_clock_us = 0
        self.plant_echoes: list[tuple[int, int]] = []

        # current horizons (ms); (0, 0) until the first decision
        self.h_r_ms = 0.0
        self.h_v_ms = 0.0
        self.current_pose_raw = np.array([0, 0, 0, 0, 0, 0, 1.0])

        # recording
        self.rec_t: list[float] = []
        self.rec_ref: list[np.ndarray] = []
        self.rec_plant: list[np.ndarray] = []
        self.frames_t: list[float] = []
        self.frames_pose: list[np.ndarray] = []
        self.dec_t: list[float] = []
        self.rollout: list[StepSample] = []
        self.t_r_raw: list[float] = []
        self.t_v_raw: list[float] = []
        self.dec_tr: list[float] = []
        self.dec_tv: list[float] = []
        self._ev_acc: list[tuple[float, float, float, float]] = []
        self._last_frame_pose: np.ndarray | None = None
        self._last_display_id = 0
        self._sim_prev_us = 0
        self.config_hash = ""

        self.warmup_us = ms_to_us(cfg.warmup_ms)
        self.end_us = self.warmup_us + ms_to_us(cfg.episode_ms)

    # ------------------------------------------------------------------
    # operator side

    def _sample(self, k: int) -> None:
        now = self.sched.now_us
        pose = self.source.pose_at(now).copy()
        noise = self.rng_sensor.normal(0.0, self.cfg.sensor_noise_m, size=3)
        pose[:3] += noise
        canonicalize_quat_block(pose)
        self.current_pose_raw = pose
        self.predictor.on_sample(now, pose)

        if now >= self.warmup_us:
            ref = self.wmap.map_array(pose)
            self.rec_t.append(now / 1000.0)
            self.rec_ref.append(ref)
            self._advance_plant(now)
            plant_pose = (
                self.plant.copy_pose() if self.plant is not None else ref.copy()
            )
            self.rec_plant.append(plant_pose)
            twin_pose = (
                self._last_frame_pose if self._last_frame_pose is not None else ref
            )
            self._accumulate_reward(ref, twin_pose, plant_pose)

        pair = self.predictor.predict_pair(self.h_r_ms, self.h_v_ms)
        payload = _PredPayload(pair[0].copy(), pair[1].copy(), self.h_r_ms, self.h_v_ms)
        pkt = TimedPacket(payload, t_origin_us=now)
        pkt.stamp("t1", now)
        self.sched.at(now + ms_to_us(self.cfg.predictor_proc_ms), self._send_prediction, pkt)

    def _send_prediction(self, pkt: TimedPacket) -> None:
        self.ch_oe.send(pkt, self.sched.now_us)

    def _accumulate_reward(self, ref, twin_pose, plant_pose) -> None:
        dv = ref[:3] - twin_pose[:3]
        dp = ref[:3] - plant_pose[:3]
        qref = ref[3:7] if ref[6] >= 0 else -ref[3:7]
        qtv = twin_pose[3:7] if twin_pose[6] >= 0 else -twin_pose[3:7]
        qtp = plant_pose[3:7] if plant_pose[6] >= 0 else -plant_pose[3:7]
        dqv = qref - qtv
        dqp = qref - qtp
        self._ev_acc.append(
            (float(dv @ dv), float(dqv @ dqv), float(dp @ dp), float(dqp @ dqp))
        )

    def _decision(self, k: int) -> None:
        now = self.sched.now_us
        # close out the reward window of the previous action
        if self.rollout:
            self.rollout[-1].reward = self._window_reward()
        self._ev_acc.clear()
        state = self._agent_state()
        action = self.policy.act(state, self.rng_policy)
        if not (0.0 <= action.h_r_ms <= self.cfg.h_max_ms) or not (
            0.0 <= action.h_v_ms <= self.cfg.h_max_ms
        ):
            raise ConfigError(f"policy emitted out-of-range horizons {action}")
        self.h_r_ms = action.h_r_ms
        self.h_v_ms = action.h_v_ms
        self.dec_t.append(now / 1000.0)
        self.dec_tr.append(self.lat.t_r_ms)
        self.dec_tv.append(self.lat.t_v_ms)
        self.rollout.append(StepSample(state=state, action=action))

    def _window_reward(self) -> float:
        if not self._ev_acc:
            return 0.0
        arr = np.asarray(self._ev_acc)
        w = self.cfg.weights
        e_v = w.w1 * float(np.sqrt(arr[:, 0].mean())) + w.w2 * float(
            np.sqrt(arr[:, 1].mean())
        )
        e_r = w.w3 * float(np.sqrt(arr[:, 2].mean())) + w.w4 * float(
            np.sqrt(arr[:, 3].mean())
        )
        return -(e_v + e_r)

    def _agent_state(self) -> np.ndarray:
        s1 = self.bounds.normalize(self.current_pose_raw)
        t_r = round(self.lat.t_r_ms)
        t_v = round(self.lat.t_v_ms)
        s2 = np.array([t_r, t_v], dtype=float) / self.cfg.h_max_ms
        return np.concatenate([s1, s2])

    def _operator_ingress(self, pkt: TimedPacket) -> None:
        now = self.sched.now_us
        self.sched.at(now + ms_to_us(self.cfg.display_proc_ms), self._display_frame, pkt)

    def _display_frame(self, pkt: TimedPacket) -> None:
        now = self.sched.now_us
        payload: _FramePayload = pkt.payload
        for origin_us, t9_us in payload.control_echoes:
            raw = self.lat.update_control(origin_us, t9_us)
            if now >= self.warmup_us:
                self.t_r_raw.append(raw)
        if payload.frame.frame_id <= self._last_display_id:
            return  # stale frame overtaken in flight
        self._last_display_id = payload.frame.frame_id
        pkt.stamp("t10", now)
        raw = self.lat.update_visual(pkt.t_origin_us, now)
        if now >= self.warmup_us:
            self.t_v_raw.append(raw)

    # ------------------------------------------------------------------
    # edge side

    def _edge_ingress(self, pkt: TimedPacket) -> None:
        now = self.sched.now_us
        pkt.stamp("t2_arrival", now)
        self.edge_server.offer(pkt, now)

    def _edge_process(self, pkt: TimedPacket, now_us: int) -> None:
        payload: _PredPayload = pkt.payload
        pkt.stamp("t2", now_us)
        visual = self.wmap.map_array(payload.p_v)
        control = synthesize_control(
            payload.p_r,
            self.wmap,
            self.guard,
            self.sigma_r,
        )
        self.visual_target = visual
        self.control_target = control
        self.visual_origin_us = pkt.t_origin_us
        self.control_origin_us = pkt.t_origin_us
        self.smoother.note_incoming(now_us)
        if self.visual_twin is None:
            self.visual_twin = TwinState.at_pose(visual)
            self.control_twin = TwinState.at_pose(control)

    def _sim_tick(self, k: int) -> None:
        now = self.sched.now_us
        dt = (now - self._sim_prev_us) / 1e6
        self._sim_prev_us = now
        if self.visual_twin is None or dt <= 0:
            return
        step_sim(self.visual_twin, self.visual_target, self.cfg.rmp, dt)
        step_sim(self.control_twin, self.control_target, self.cfg.rmp, dt)

    def _render_tick(self, k: int) -> None:
        now = self.sched.now_us
        if self.visual_twin is None:
            return
        frame = render_tick(self.visual_twin, now)
        if now >= self.warmup_us:
            self.frames_t.append(now / 1000.0)
            self.frames_pose.append(frame.pose7.copy())
        self._last_frame_pose = frame.pose7
        echoes = self.pending_echoes
        self.pending_echoes = []
        pkt = TimedPacket(
            _FramePayload(frame, echoes), t_origin_us=self.visual_origin_us
        )
        pkt.stamp("t6", now)
        self.ch_eo.send(pkt, now)

    def _command_tick(self, k: int) -> None:
        now = self.sched.now_us
        if self.control_twin is None:
            return
        cmd = smooth_command(self.smoother, self.control_twin.q, now)
        canonicalize_quat_block(cmd)
        pkt = TimedPacket(_CmdPayload(cmd), t_origin_us=self.control_origin_us)
        pkt.stamp("t3", now)
        self.ch_ep.send(pkt, now)

    def _edge_feedback(self, pkt: TimedPacket) -> None:
        payload: _FeedbackPayload = pkt.payload
        self.sigma_r = payload.pose
        self.pending_echoes.extend(payload.echoes)

    # ------------------------------------------------------------------
    # plant side

    def _plant_ingress(self, pkt: TimedPacket) -> None:
        now = self.sched.now_us
        pkt.stamp("t8", now)
        self.plant_server.offer(pkt, now)

    def _plant_apply(self, pkt: TimedPacket, now_us: int) -> None:
        payload: _CmdPayload = pkt.payload
        self._advance_plant(now_us)
        if self.plant is None:
            self.plant = PlantState.at_pose(payload.cmd)
            self.plant_clock_us = (now_us // 1000) * 1000
        self.plant.setpoint = payload.cmd.copy()
        pkt.stamp("t9", now_us)
        self.plant_echoes.append((pkt.t_origin_us, now_us))

    def _advance_plant(self, to_us: int) -> None:
        if self.plant is None:
            return
        n = (to_us - self.plant_clock_us) // 1000
        if n > 0:
            plant_step(self.plant, self.cfg.pid, PLANT_DT, int(n))
            self.plant_clock_us += 1000 * int(n)

    def _feedback_tick(self, k: int) -> None:
        now = self.sched.now_us
        if self.plant is None:
            return
        self._advance_plant(now)
        echoes = self.plant_echoes
        self.plant_echoes = []
        pkt = TimedPacket(
            _FeedbackPayload(self.plant.copy_pose(), echoes), t_origin_us=now
        )
        self.ch_pe.send(pkt, now)

    # ------------------------------------------------------------------

    def _schedule_grids(self) -> None:
        cfg = self.cfg
        end = self.end_us
        k = 0
        while True:
            t = round(k * 1_000_000 / cfg.sample_hz)
            if t > end:
                break
            self.sched.at(t, self._sample, k)
            k += 1
        k = 0
        while True:
            t = round(k * 1_000_000 / cfg.sim_hz)
            if t > end:
                break
            self.sched.at(t, self._sim_tick, k)
            k += 1
        k = 1
        while True:
            t = round(k * cfg.render_ms * 1000)
            if t > end:
                break
            self.sched.at(t, self._render_tick, k)
            k += 1
        k = 1
        while True:
            t = round(k * cfg.t_co_ms * 1000)
            if t > end:
                break
            self.sched.at(t, self._command_tick, k)
            k += 1
        k = 1
        off = ms_to_us(cfg.feedback_ms) // 2
        while True:
            t = round(k * cfg.feedback_ms * 1000) + off
            if t > end:
                break
            self.sched.at(t, self._feedback_tick, k)
            k += 1
        k = 0
        while True:
            t = self.warmup_us + round(k * 1_000_000 / cfg.decision_hz)
            if t > end:
                break
            self.sched.at(t, self._decision, k)
            k += 1

    def run(self) -> tuple[EpisodeRecord, list[StepSample]]:
        self._schedule_grids()
        self.sched.run_until(self.end_us)
        self._advance_plant(self.end_us)
        if self.rollout:
            self.rollout[-1].reward = self._window_reward()
        actions = np.array(
            [[s.action.h_r_ms, s.action.h_v_ms] for s in self.rollout]
        ).reshape(-1, 2)
        rec = EpisodeRecord(
            t_ms=np.array(self.rec_t),
            ref=np.array(self.rec_ref).reshape(-1, POSE_DIM),
            plant=np.array(self.rec_plant).reshape(-1, POSE_DIM),
            frame_t_ms=np.array(self.frames_t),
            frame_pose=np.array(self.frames_pose).reshape(-1, POSE_DIM),
            decision_t_ms=np.array(self.dec_t),
            actions_ms=actions,
            rewards=np.array([s.reward for s in self.rollout]),
            t_r_ewma_ms=np.array(self.dec_tr),
            t_v_ewma_ms=np.array(self.dec_tv),
            t_r_raw_ms=np.array(self.t_r_raw),
            t_v_raw_ms=np.array(self.t_v_raw),
            counters={
                "sim_ticks": self.visual_twin.ticks if self.visual_twin else 0,
                "plant_steps": self.plant.steps if self.plant else 0,
                "frames": self.visual_twin.last_frame_id if self.visual_twin else 0,
                "displayed": self._last_display_id,
                "predictions_sent": self.ch_oe.sent,
                "commands_sent": self.ch_ep.sent,
                "edge_completed": self.edge_server.completed,
                "plant_completed": self.plant_server.completed,
            },
            seed=self.seed,
            config_hash=self.config_hash,
        )
        return rec, self.rollout


def run_episode(
    cfg: PipelineConfig, shape: ShapeSpec, policy, seed: int
) -> tuple[EpisodeRecord, list[StepSample]]:
    """Run one scripted episode; see harness.run for the CLI entry."""
    pipe = Pipeline(cfg, ScriptedSource(shape), policy, seed)
    return pipe.run()
