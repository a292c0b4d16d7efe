"""Delay channels, freshest-packet buffering, and E2E latency accounting.

Channels model transport only: each packet is delivered at send time plus
a sampled delay (constant, truncated-normal, or trace-driven), and packets
may overtake each other exactly as datagrams do. Staleness is resolved at
the receiving stage by a single-slot buffer that always keeps the packet
with the newest origin timestamp while its server is busy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .core import US_PER_MS
from .errors import ConfigError, InstrumentationError

EWMA_ALPHA = 0.1


@dataclass
class TimedPacket:
    """Payload plus origin timestamp and per-stage stamps (microseconds)."""

    payload: Any
    t_origin_us: int
    stamps: dict[str, int] = field(default_factory=dict)

    def stamp(self, stage: str, t_us: int) -> None:
        self.stamps[stage] = t_us

    def latest_stamp_us(self) -> int:
        if not self.stamps:
            return self.t_origin_us
        return max(self.stamps.values())


@dataclass(frozen=True)
class DelaySpec:
    """Transport delay model for one channel direction."""

    kind: str = "constant"  # constant | normal | trace
    constant_ms: float = 0.0
    mean_ms: float = 0.0
    std_ms: float = 0.0
    trace_ms: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("constant", "normal", "trace"):
            raise ConfigError(f"unknown delay kind {self.kind!r}")
        if self.kind == "trace" and not self.trace_ms:
            raise ConfigError("trace delay spec requires trace_ms values")

    @classmethod
    def normal(cls, mean_ms: float, std_ms: float) -> "DelaySpec":
        return cls(kind="normal", mean_ms=mean_ms, std_ms=std_ms)

    @classmethod
    def constant(cls, ms: float) -> "DelaySpec":
        return cls(kind="constant", constant_ms=ms)

    @property
    def nominal_mean_ms(self) -> float:
        if self.kind == "constant":
            return self.constant_ms
        if self.kind == "normal":
            return self.mean_ms
        return float(np.mean(self.trace_ms))


class DelayChannel:
    """Schedules packet deliveries through the event scheduler.

    Each channel owns an independent RNG stream so that seeded runs are
    bit-reproducible regardless of interleaving elsewhere.
    """

    def __init__(
        self,
        spec: DelaySpec,
        scheduler,
        deliver: Callable[[TimedPacket], None],
        rng: np.random.Generator,
        name: str = "",
    ):
        self.spec = spec
        self.scheduler = scheduler
        self.deliver = deliver
        self.rng = rng
        self.name = name
        self._trace_idx = 0
        self.sent = 0

    def sample_delay_us(self) -> int:
        s = self.spec
        if s.kind == "constant":
            d_ms = s.constant_ms
        elif s.kind == "normal":
            d_ms = s.mean_ms + s.std_ms * self.rng.standard_normal()
            if d_ms < 0.0:
                d_ms = 0.0
        else:
            d_ms = s.trace_ms[self._trace_idx % len(s.trace_ms)]
            self._trace_idx += 1
        return int(round(d_ms * US_PER_MS))

    def send(self, pkt: TimedPacket, now_us: int) -> None:
        if now_us < pkt.latest_stamp_us():
            raise InstrumentationError(
                f"channel {self.name}: send at {now_us} before packet stamp"
            )
        self.sent += 1
        self.scheduler.at(now_us + self.sample_delay_us(), self.deliver, pkt)


class FreshestBuffer:
    """Single waiting slot holding the packet with the greatest t_origin.

    offer() returns "accepted" when the packet enters service or the empty
    slot, and "replaced_stale" when one of the two contenders (incoming or
    waiting) was discarded for being older.
    """

    def __init__(self):
        self.in_service: TimedPacket | None = None
        self.waiting: TimedPacket | None = None

    def offer(self, pkt: TimedPacket) -> str:
        if self.in_service is None:
            self.in_service = pkt
            return "accepted"
        if self.waiting is None:
            self.waiting = pkt
            return "accepted"
        if pkt.t_origin_us >= self.waiting.t_origin_us:
            self.waiting = pkt
        return "replaced_stale"

    def complete_service(self) -> TimedPacket | None:
        """Finish the in-service packet; promote the waiting one if any."""
        done = self.in_service
        self.in_service = self.waiting
        self.waiting = None
        return done


class StageServer:
    """A processing stage with fixed service time and freshest-packet intake.

    on_start fires when a packet enters service; on_complete fires at
    service completion (the stage's output instant).
    """

    def __init__(
        self,
        scheduler,
        service_us: int,
        on_complete: Callable[[TimedPacket, int], None],
        name: str = "",
        on_start: Callable[[TimedPacket, int], None] | None = None,
    ):
        self.scheduler = scheduler
        self.service_us = int(service_us)
        self.on_complete = on_complete
        self.on_start = on_start
        self.name = name
        self.buffer = FreshestBuffer()
        self.completed = 0

    def offer(self, pkt: TimedPacket, now_us: int) -> str:
        was_idle = self.buffer.in_service is None
        verdict = self.buffer.offer(pkt)
        if was_idle:
            self._start(pkt, now_us)
        return verdict

    def _start(self, pkt: TimedPacket, now_us: int) -> None:
        if self.on_start is not None:
            self.on_start(pkt, now_us)
        self.scheduler.at(now_us + self.service_us, self._complete)

    def _complete(self) -> None:
        now_us = self.scheduler.now_us
        done = self.buffer.complete_service()
        assert done is not None
        self.completed += 1
        self.on_complete(done, now_us)
        nxt = self.buffer.in_service
        if nxt is not None:
            self._start(nxt, now_us)


@dataclass
class LatencyMeasurement:
    """Exponentially smoothed E2E delays exposed to the horizon agent."""

    alpha: float = EWMA_ALPHA
    t_r_ms: float = 0.0
    t_v_ms: float = 0.0
    n_r: int = 0
    n_v: int = 0

    def update_control(self, t_origin_us: int, t_done_us: int) -> float:
        raw_ms = self._raw(t_origin_us, t_done_us)
        if self.n_r == 0:
            self.t_r_ms = raw_ms
        else:
            self.t_r_ms += self.alpha * (raw_ms - self.t_r_ms)
        self.n_r += 1
        return raw_ms

    def update_visual(self, t_origin_us: int, t_done_us: int) -> float:
        raw_ms = self._raw(t_origin_us, t_done_us)
        if self.n_v == 0:
            self.t_v_ms = raw_ms
        else:
            self.t_v_ms += self.alpha * (raw_ms - self.t_v_ms)
        self.n_v += 1
        return raw_ms

    @staticmethod
    def _raw(t_origin_us: int | None, t_done_us: int | None) -> float:
        if t_origin_us is None or t_done_us is None:
            raise InstrumentationError("missing origin/completion stamp")
        if t_done_us < t_origin_us:
            raise InstrumentationError("completion stamp precedes origin")
        return (t_done_us - t_origin_us) / US_PER_MS


def load_delay_trace(path) -> DelaySpec:
    """Read a delay trace CSV of (send_ms, delay_ms) rows."""
    import csv

    from .errors import ParseError

    delays: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["send_ms", "delay_ms"]:
            raise ParseError(f"expected header send_ms,delay_ms, got {header!r}", line=1)
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                delays.append(float(row[1]))
            except (IndexError, ValueError) as exc:
                raise ParseError(str(exc), line=ln) from None
    if not delays:
        raise ParseError("trace has no delay rows", line=2)
    return DelaySpec(kind="trace", trace_ms=tuple(delays))
