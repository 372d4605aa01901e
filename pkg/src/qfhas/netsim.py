"""Deterministic fluid-flow simulation of HAS clients behind one bottleneck.

Every active flow (chunk download or greedy cross-traffic flow) receives a
share of the link proportional to its weight. In ``ideal`` mode all weights
are 1, so active flows split the capacity equally and the link is fully used
whenever one flow is active. In ``noisy`` mode weights are redrawn uniformly
in ``[1-m, 1+m]`` every ``noise_interval`` seconds and the shares are
renormalized to the capacity.

Progress is tracked with a virtual service clock ``V`` (bits delivered per
unit weight since t=0): a flow of weight ``w`` that joined at ``V0`` has
received ``w * (V - V0)`` bits while weights stay constant, so completion
times fall out of a heap keyed by the ``V`` at which each job finishes.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from qfhas.client import CONTROLLERS, ClientConfig, buffer_has_slot
from qfhas.coordinator import Coordinator, CoordinatorConfig
from qfhas.errors import DomainError
from qfhas.utility import UtilityCurve, evaluate

PLAYBACK_START_CHUNKS = 2

# Event kinds, in the order the engine breaks ties at equal timestamps
# (insertion order is the real tie-breaker; these only label the heap).
_EV_COMPLETE = "complete"
_EV_TICK = "tick"
_EV_UNDERRUN = "underrun"
_EV_SLOT = "slot"
_EV_DELIVER = "deliver"
_EV_REPLY = "reply"
_EV_USER_START = "user_start"
_EV_USER_STOP = "user_stop"
_EV_CROSS_START = "cross_start"
_EV_CROSS_STOP = "cross_stop"
_EV_CAPACITY = "capacity"
_EV_NOISE = "noise"
_EV_SAMPLE = "sample"


@dataclass(frozen=True)
class LinkModel:
    """Bottleneck description. ``capacity_trace`` holds ``(start_time, bits/s)`` steps."""

    capacity_trace: tuple[tuple[float, float], ...]
    share_mode: str = "ideal"
    noise_seed: int = 0
    noise_magnitude: float = 0.0
    noise_interval: float = 0.5
    overhead_factor: float = 1.0

    def __post_init__(self):
        trace = tuple((float(t), float(c)) for t, c in self.capacity_trace)
        object.__setattr__(self, "capacity_trace", trace)
        if not trace or trace[0][0] != 0.0:
            raise DomainError("capacity trace must start at t=0")
        if any(t1 <= t0 for (t0, _), (t1, _) in zip(trace, trace[1:])):
            raise DomainError("capacity trace times must be strictly increasing")
        if any(c <= 0 for _, c in trace):
            raise DomainError("capacity must be positive at all times")
        if self.share_mode not in ("ideal", "noisy"):
            raise DomainError(f"unknown share mode {self.share_mode!r}")
        if not (0 <= self.noise_magnitude < 1):
            raise DomainError("noise magnitude must lie in [0, 1)")
        if not self.noise_interval > 0:
            raise DomainError("noise interval must be positive")
        if not self.overhead_factor >= 1:
            raise DomainError("overhead factor must be >= 1")

    @classmethod
    def constant(cls, capacity: float, **kw) -> "LinkModel":
        return cls(((0.0, capacity),), **kw)

    def capacity_at(self, t: float) -> float:
        cap = self.capacity_trace[0][1]
        for start, c in self.capacity_trace:
            if start > t:
                break
            cap = c
        return cap

    def capacity_integral(self, t0: float, t1: float) -> float:
        """Integral of the nominal capacity over ``[t0, t1]`` in bits."""
        total = 0.0
        steps = self.capacity_trace
        for i, (start, c) in enumerate(steps):
            end = steps[i + 1][0] if i + 1 < len(steps) else math.inf
            lo, hi = max(start, t0), min(end, t1)
            if hi > lo:
                total += c * (hi - lo)
        return total


@dataclass
class DownloadJob:
    user_id: int
    bits_total: float
    start_time: float
    bits_done: float = 0.0
    finish_time: float | None = None
    bitrate: float = 0.0

    @property
    def bytes_total(self) -> float:
        return self.bits_total / 8

    @property
    def bytes_done(self) -> float:
        return self.bits_done / 8

    @property
    def remaining(self) -> float:
        return self.bits_total - self.bits_done


@dataclass(frozen=True)
class CrossTrafficFlow:
    start_time: float = 0.0
    stop_time: float = math.inf

    def active_at(self, t: float) -> bool:
        return self.start_time <= t < self.stop_time


@dataclass(frozen=True)
class MessageChannel:
    one_way_latency: float = 0.0


class PlayoutBuffer:
    """Seconds of stored video, drained at real-time speed while playing."""

    def __init__(self, capacity: float, start_threshold: float):
        self.capacity = capacity
        self.start_threshold = start_threshold
        self.stored = 0.0
        self.t_ref = 0.0
        self.playing = False
        self.underrun_count = 0

    def level(self, t: float) -> float:
        if self.playing:
            return max(self.stored - (t - self.t_ref), 0.0)
        return self.stored

    def sync(self, t: float) -> None:
        self.stored = self.level(t)
        self.t_ref = t

    def add(self, t: float, seconds: float) -> None:
        self.sync(t)
        self.stored = min(self.stored + seconds, self.capacity)
        if not self.playing and self.stored >= self.start_threshold - 1e-9:
            self.playing = True

    def empty_at(self) -> float | None:
        return self.t_ref + self.stored if self.playing else None

    def underrun(self, t: float) -> None:
        self.stored = 0.0
        self.t_ref = t
        self.playing = False
        self.underrun_count += 1


def share_rates(capacity: float, weights: Sequence[float]) -> list[float]:
    total = sum(weights)
    if total <= 0:
        return [0.0] * len(weights)
    return [capacity * w / total for w in weights]


def advance_fluid(jobs: Sequence[DownloadJob], capacity: float, dt: float, t0: float = 0.0,
                  weights: Sequence[float] | None = None) -> list[DownloadJob]:
    """Serve ``jobs`` for ``dt`` seconds, re-sharing the link each time one completes.

    Jobs with ``bits_total = inf`` behave as greedy cross-traffic. Returns the
    jobs that finished, in completion order, with ``finish_time`` set.
    """
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    active = [j for j in jobs if j.remaining > 0]
    w = {id(j): 1.0 for j in active} if weights is None else {
        id(j): wt for j, wt in zip(jobs, weights) if j.remaining > 0}
    finished = []
    t, left = t0, dt
    while active and left > 0:
        rates = share_rates(capacity, [w[id(j)] for j in active])
        step = min((j.remaining / r for j, r in zip(active, rates) if r > 0), default=math.inf)
        step = min(step, left)
        for j, r in zip(active, rates):
            j.bits_done = min(j.bits_total, j.bits_done + r * step)
        t += step
        left -= step
        still = []
        for j in active:
            if math.isfinite(j.bits_total) and j.remaining <= 1e-9 * max(j.bits_total, 1.0):
                j.bits_done = j.bits_total
                j.finish_time = t
                finished.append(j)
            else:
                still.append(j)
        active = still
    return finished


@dataclass(slots=True)
class TraceRecord:
    time: float
    user_id: int
    event_kind: str
    level: int | None = None
    bitrate: float | None = None
    ideal_rate: float | None = None
    price: float | None = None
    downloading_time: float | None = None
    reported_time: float | None = None
    buffer_seconds: float | None = None
    ssim_of_chunk: float | None = None


TRACE_FIELDS = tuple(TraceRecord.__dataclass_fields__)


@dataclass(slots=True)
class UsageSample:
    """Cumulative bits since t=0: HAS payload, cross traffic, and nominal capacity."""

    time: float
    has_bits: float
    cross_bits: float
    capacity_bits: float


USAGE_FIELDS = tuple(UsageSample.__dataclass_fields__)


@dataclass
class RunTrace:
    records: list[TraceRecord] = field(default_factory=list)
    usage: list[UsageSample] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class UserSpec:
    controller: str
    curve: UtilityCurve
    start_time: float = 0.0
    stop_time: float = math.inf


@dataclass(frozen=True)
class SimConfig:
    """Everything the engine needs; built from a validated scenario."""

    duration: float
    warmup: float
    link: LinkModel
    users: tuple[UserSpec, ...]
    client: ClientConfig
    coordinator: CoordinatorConfig
    cross_traffic: tuple[CrossTrafficFlow, ...] = ()
    channel: MessageChannel = MessageChannel()
    tick_phase: float = 0.0
    seed: int = 0


class _Flow:
    __slots__ = ("fid", "weight", "v_start", "base", "size", "job", "user", "is_cross")

    def __init__(self, fid, weight, v_start, size, job=None, user=None):
        self.fid = fid
        self.weight = weight
        self.v_start = v_start
        self.base = 0.0
        self.size = size
        self.job = job
        self.user = user
        self.is_cross = job is None


class _User:
    __slots__ = ("uid", "spec", "client", "buffer", "active", "flow", "price", "decision",
                 "slot_version", "underrun_version", "awaiting_reply")

    def __init__(self, uid, spec, client, buffer):
        self.uid = uid
        self.spec = spec
        self.client = client
        self.buffer = buffer
        self.active = False
        self.flow = None
        self.price = 0.0
        self.decision = None
        self.slot_version = 0
        self.underrun_version = 0
        self.awaiting_reply = False


class Simulator:
    def __init__(self, cfg: SimConfig):
        if cfg.client.chunk_duration != cfg.coordinator.chunk_duration:
            raise DomainError("client and coordinator chunk durations differ")
        self.cfg = cfg
        self.t_ck = cfg.client.chunk_duration
        self.coordinator = Coordinator(cfg.coordinator)
        self.trace = RunTrace()
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._noise_rng = np.random.default_rng(cfg.link.noise_seed)
        self._noisy = cfg.link.share_mode == "noisy" and cfg.link.noise_magnitude > 0

        self._flows: dict[int, _Flow] = {}
        self._next_fid = 0
        self._V = 0.0
        self._W = 0.0
        self._W_has = 0.0
        self._cap = cfg.link.capacity_at(0.0) / cfg.link.overhead_factor
        self._nominal = cfg.link.capacity_at(0.0)
        self._finish_heap: list = []
        self._flow_version = 0
        self._last_t = 0.0
        self._has_bits = 0.0
        self._cross_bits = 0.0
        self._cap_bits = 0.0

        start_thr = min(PLAYBACK_START_CHUNKS, cfg.client.buffer_capacity_chunks) * self.t_ck
        self.users = []
        for uid, spec in enumerate(cfg.users):
            try:
                ctrl_cls = CONTROLLERS[spec.controller]
            except KeyError:
                raise DomainError(f"unknown controller {spec.controller!r}") from None
            self.users.append(_User(uid, spec, ctrl_cls(cfg.client, spec.curve),
                                    PlayoutBuffer(cfg.client.buffer_capacity, start_thr)))

    # -- event plumbing -------------------------------------------------

    def _push(self, t, kind, *payload):
        if t < self.now:
            t = self.now
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, payload))

    def _record(self, **kw):
        self.trace.records.append(TraceRecord(**kw))

    # -- fluid model ----------------------------------------------------

    def _advance(self, t):
        dt = t - self._last_t
        if dt <= 0:
            return
        if self._W > 0:
            dv = self._cap * dt / self._W
            self._V += dv
            self._has_bits += dv * self._W_has
            self._cross_bits += dv * (self._W - self._W_has)
        self._cap_bits += self._nominal * dt
        self._last_t = t

    def _draw_weight(self):
        if not self._noisy:
            return 1.0
        m = self.cfg.link.noise_magnitude
        return float(self._noise_rng.uniform(1 - m, 1 + m))

    def _add_flow(self, size, job=None, user=None):
        fid = self._next_fid
        self._next_fid += 1
        flow = _Flow(fid, self._draw_weight(), self._V, size, job, user)
        self._flows[fid] = flow
        self._W += flow.weight
        if not flow.is_cross:
            self._W_has += flow.weight
            heapq.heappush(self._finish_heap, (self._V + size / flow.weight, fid))
        self._reschedule_completion()
        return flow

    def _remove_flow(self, flow):
        del self._flows[flow.fid]
        self._W -= flow.weight
        if not flow.is_cross:
            self._W_has -= flow.weight
        if not self._flows:
            self._W = self._W_has = 0.0

    def _progress(self, flow):
        return flow.base + flow.weight * (self._V - flow.v_start)

    def _rebase_weights(self):
        """Redraw every flow weight (noisy mode); progress so far is kept."""
        self._finish_heap = []
        self._W = self._W_has = 0.0
        for fid in sorted(self._flows):
            flow = self._flows[fid]
            flow.base = self._progress(flow)
            flow.v_start = self._V
            flow.weight = self._draw_weight()
            self._W += flow.weight
            if not flow.is_cross:
                self._W_has += flow.weight
                heapq.heappush(self._finish_heap,
                               (self._V + (flow.size - flow.base) / flow.weight, fid))

    def _reschedule_completion(self):
        self._flow_version += 1
        while self._finish_heap and self._finish_heap[0][1] not in self._flows:
            heapq.heappop(self._finish_heap)
        if not self._finish_heap or self._W <= 0:
            return
        v_fin = self._finish_heap[0][0]
        t = self._last_t + max(v_fin - self._V, 0.0) * self._W / self._cap
        self._push(t, _EV_COMPLETE, self._flow_version)

    # -- users ----------------------------------------------------------

    def _schedule_underrun(self, user):
        user.underrun_version += 1
        t_empty = user.buffer.empty_at()
        if t_empty is not None:
            self._push(t_empty, _EV_UNDERRUN, user.uid, user.underrun_version)

    def _send_report(self, user, value):
        user.awaiting_reply = True
        self._push(self.now + self.cfg.channel.one_way_latency, _EV_DELIVER, user.uid, value)

    def _try_request(self, user):
        if not user.active or user.flow is not None or user.awaiting_reply:
            return
        level = user.buffer.level(self.now)
        if not buffer_has_slot(level, self.cfg.client):
            if user.buffer.playing:
                user.slot_version += 1
                wait = level - (self.cfg.client.buffer_capacity - self.t_ck)
                self._push(self.now + wait, _EV_SLOT, user.uid, user.slot_version)
            return
        dec = user.client.decide(user.price, level)
        user.decision = dec
        size = dec.bitrate * self.t_ck
        self._advance(self.now)
        job = DownloadJob(user.uid, size, self.now, bitrate=dec.bitrate)
        user.flow = self._add_flow(size, job, user)

    def _complete_user_job(self, flow):
        user = flow.user
        job = flow.job
        job.bits_done = job.bits_total
        job.finish_time = self.now
        user.flow = None
        tau = max(job.finish_time - job.start_time, 1e-12)
        user.buffer.add(self.now, self.t_ck)
        self._schedule_underrun(user)
        report = user.client.observe(tau, job.bits_total / tau, self.now)
        dec = user.decision
        self._record(time=self.now, user_id=user.uid, event_kind="chunk", level=dec.level,
                     bitrate=dec.bitrate, ideal_rate=dec.ideal_rate, price=dec.price,
                     downloading_time=tau, reported_time=report,
                     buffer_seconds=user.buffer.level(self.now),
                     ssim_of_chunk=min(max(evaluate(user.spec.curve, dec.bitrate), 0.0), 1.0))
        if user.client.uses_coordinator:
            self._send_report(user, report)
        else:
            self._try_request(user)

    # -- event handlers -------------------------------------------------

    def _on_complete(self, version):
        if version != self._flow_version:
            return
        self._advance(self.now)
        done = []
        while self._finish_heap:
            v_fin, fid = self._finish_heap[0]
            if fid not in self._flows:
                heapq.heappop(self._finish_heap)
                continue
            if v_fin - self._V > 1e-9 * max(v_fin, 1.0):
                break
            heapq.heappop(self._finish_heap)
            flow = self._flows[fid]
            self._remove_flow(flow)
            done.append(flow)
        for flow in done:
            self._complete_user_job(flow)
        self._reschedule_completion()

    def _on_tick(self):
        price = self.coordinator.tick()
        self._record(time=self.now, user_id=-1, event_kind="tick", price=price)
        self._push(self.now + self.t_ck, _EV_TICK)

    def _on_underrun(self, uid, version):
        user = self.users[uid]
        if version != user.underrun_version or not user.active:
            return
        user.buffer.underrun(self.now)
        self._record(time=self.now, user_id=uid, event_kind="underrun", buffer_seconds=0.0)

    def _on_deliver(self, uid, value):
        price = self.coordinator.on_measurement(value)
        self._push(self.now + self.cfg.channel.one_way_latency, _EV_REPLY, uid, price)

    def _on_reply(self, uid, price):
        user = self.users[uid]
        user.price = price
        user.awaiting_reply = False
        self._try_request(user)

    def _on_slot(self, uid, version):
        user = self.users[uid]
        if version == user.slot_version:
            self._try_request(user)

    def _on_user_start(self, uid):
        user = self.users[uid]
        user.active = True
        if user.client.uses_coordinator:
            # a zero report leaves the running maximum alone and fetches the price
            self._send_report(user, 0.0)
        else:
            self._try_request(user)

    def _on_user_stop(self, uid):
        user = self.users[uid]
        user.active = False
        user.underrun_version += 1
        user.slot_version += 1
        if user.flow is not None:
            self._advance(self.now)
            self._remove_flow(user.flow)
            user.flow = None
            self._reschedule_completion()

    def _on_cross_start(self, idx):
        self._advance(self.now)
        self._cross_flows[idx] = self._add_flow(math.inf)

    def _on_cross_stop(self, idx):
        flow = self._cross_flows.pop(idx, None)
        if flow is not None:
            self._advance(self.now)
            self._remove_flow(flow)
            self._reschedule_completion()

    def _on_capacity(self, cap):
        self._advance(self.now)
        self._nominal = cap
        self._cap = cap / self.cfg.link.overhead_factor
        self._reschedule_completion()

    def _on_noise(self):
        self._advance(self.now)
        self._rebase_weights()
        self._reschedule_completion()
        self._push(self.now + self.cfg.link.noise_interval, _EV_NOISE)

    def _on_sample(self):
        self._advance(self.now)
        self.trace.usage.append(UsageSample(self.now, self._has_bits, self._cross_bits, self._cap_bits))

    # -- main loop ------------------------------------------------------

    def run(self) -> RunTrace:
        cfg = self.cfg
        self._cross_flows = {}
        for start, cap in cfg.link.capacity_trace[1:]:
            self._push(start, _EV_CAPACITY, cap)
        for uid, spec in enumerate(cfg.users):
            self._push(spec.start_time, _EV_USER_START, uid)
            if math.isfinite(spec.stop_time):
                self._push(spec.stop_time, _EV_USER_STOP, uid)
        for idx, ct in enumerate(cfg.cross_traffic):
            self._push(ct.start_time, _EV_CROSS_START, idx)
            if math.isfinite(ct.stop_time):
                self._push(ct.stop_time, _EV_CROSS_STOP, idx)
        self._push(cfg.tick_phase, _EV_TICK)
        if self._noisy:
            self._push(cfg.link.noise_interval, _EV_NOISE)
        n_samples = int(math.ceil(cfg.duration / self.t_ck))
        sample_times = sorted({k * self.t_ck for k in range(n_samples)} | {cfg.warmup})
        for t in sample_times:
            if t < cfg.duration:
                self._push(t, _EV_SAMPLE)

        handlers = {
            _EV_COMPLETE: self._on_complete, _EV_TICK: self._on_tick,
            _EV_UNDERRUN: self._on_underrun, _EV_SLOT: self._on_slot,
            _EV_DELIVER: self._on_deliver, _EV_REPLY: self._on_reply,
            _EV_USER_START: self._on_user_start, _EV_USER_STOP: self._on_user_stop,
            _EV_CROSS_START: self._on_cross_start, _EV_CROSS_STOP: self._on_cross_stop,
            _EV_CAPACITY: self._on_capacity, _EV_NOISE: self._on_noise,
            _EV_SAMPLE: self._on_sample,
        }
        heap = self._heap
        while heap and heap[0][0] < cfg.duration:
            t, _, kind, payload = heapq.heappop(heap)
            if t < self.now:
                raise AssertionError(f"event at {t} precedes current time {self.now}")
            self.now = t
            handlers[kind](*payload)
        self.now = cfg.duration
        self._on_sample()
        self.trace.meta = self._meta()
        return self.trace

    def _meta(self):
        cfg = self.cfg
        return {
            "duration": cfg.duration,
            "warmup": cfg.warmup,
            "chunk_duration": self.t_ck,
            "buffer_capacity_chunks": cfg.client.buffer_capacity_chunks,
            "gamma": cfg.coordinator.gamma,
            "seed": cfg.seed,
            "n_cross": len(cfg.cross_traffic),
            "capacity_trace": [list(p) for p in cfg.link.capacity_trace],
            "users": [
                {"user_id": u.uid, "controller": u.spec.controller, "curve": u.spec.curve.label,
                 "a": u.spec.curve.a, "b": u.spec.curve.b, "c": u.spec.curve.c,
                 "start_time": u.spec.start_time,
                 "stop_time": u.spec.stop_time if math.isfinite(u.spec.stop_time) else None}
                for u in self.users
            ],
        }


def simulate(cfg: SimConfig) -> RunTrace:
    return Simulator(cfg).run()

