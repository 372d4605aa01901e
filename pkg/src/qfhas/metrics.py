"""Regime metrics computed from a :class:`RunTrace`.

Everything here is a pure function of the trace, so metrics recomputed from
trace files match the in-memory values. A chunk belongs to the regime window
when its completion time, at the trace's microsecond resolution, is at or
after the warmup.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from qfhas.errors import MetricError
from qfhas.netsim import LinkModel, RunTrace, TraceRecord


def in_regime(t: float, warmup: float) -> bool:
    return round(t, 6) >= warmup


def compute_delta_ssim(chunk_ssims: Sequence[float]) -> float:
    """Mean absolute SSIM change between consecutive chunks."""
    if len(chunk_ssims) < 2:
        raise MetricError(f"need at least 2 chunks, got {len(chunk_ssims)}")
    s = np.asarray(chunk_ssims, dtype=float)
    # cumsum accumulates left to right, so the result is bit-identical to a plain loop
    return float(np.abs(np.diff(s)).cumsum()[-1] / (len(s) - 1))


@dataclass(frozen=True)
class CapacityUsage:
    has: float
    cross: float

    @property
    def total(self) -> float:
        return self.has + self.cross


def _sample_at(usage, t):
    """Last usage sample taken at or before ``t``."""
    best = None
    for s in usage:
        if s.time <= t + 1e-9:
            best = s
        else:
            break
    return best


def compute_capacity_usage(trace: RunTrace, link: LinkModel | None = None,
                           start: float | None = None, end: float | None = None) -> CapacityUsage:
    """Delivered HAS and cross-traffic bits over the integrated capacity.

    The window defaults to ``[warmup, duration]``. Capacity is integrated
    from ``link`` when given, otherwise from the trace's own samples.
    """
    if not trace.usage:
        raise MetricError("trace has no usage samples")
    start = trace.meta.get("warmup", 0.0) if start is None else start
    end = trace.meta.get("duration", trace.usage[-1].time) if end is None else end
    s0 = _sample_at(trace.usage, start) or trace.usage[0]
    s1 = _sample_at(trace.usage, end)
    if link is not None:
        cap = link.capacity_integral(s0.time, s1.time)
    else:
        cap = s1.capacity_bits - s0.capacity_bits
    if cap <= 0:
        return CapacityUsage(0.0, 0.0)
    return CapacityUsage((s1.has_bits - s0.has_bits) / cap, (s1.cross_bits - s0.cross_bits) / cap)


@dataclass(frozen=True)
class BoxStats:
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    mean: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "BoxStats":
        if len(values) == 0:
            raise MetricError("box statistics of an empty population")
        v = np.sort(np.asarray(values, dtype=float))
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        return cls(float(v[0]), float(q1), float(med), float(q3), float(v[-1]), math.fsum(v) / len(v))


@dataclass(frozen=True)
class UserMetrics:
    user_id: int
    controller: str
    curve: str
    chunks: int
    average_ssim: float | None
    delta_ssim: float | None
    mean_bitrate: float | None
    underruns: int


@dataclass(frozen=True)
class SummaryMetrics:
    users: tuple[UserMetrics, ...]
    average_ssim: BoxStats | None
    delta_ssim: BoxStats | None
    capacity_usage: float
    cross_usage: float
    requested_rate_fraction: float
    underruns: int
    mean_price: float

    @property
    def min_average_ssim(self) -> float:
        return self.average_ssim.minimum

    @property
    def mean_delta_ssim(self) -> float:
        return self.delta_ssim.mean


def regime_chunks(trace: RunTrace) -> dict[int, list[TraceRecord]]:
    warmup = trace.meta.get("warmup", 0.0)
    out: dict[int, list[TraceRecord]] = {u["user_id"]: [] for u in trace.meta.get("users", [])}
    for r in trace.records:
        if r.event_kind == "chunk" and in_regime(r.time, warmup):
            out.setdefault(r.user_id, []).append(r)
    return out


def _mean_capacity(meta, start, end):
    link = LinkModel(tuple(tuple(p) for p in meta["capacity_trace"]))
    return link.capacity_integral(start, end) / (end - start)


def summarize(trace: RunTrace) -> SummaryMetrics:
    meta = trace.meta
    warmup, duration = meta["warmup"], meta["duration"]
    chunks = regime_chunks(trace)
    under: dict[int, int] = {}
    prices = []
    for r in trace.records:
        if not in_regime(r.time, warmup):
            continue
        if r.event_kind == "underrun":
            under[r.user_id] = under.get(r.user_id, 0) + 1
        elif r.event_kind == "tick":
            prices.append(r.price)

    users = []
    for u in meta["users"]:
        uid = u["user_id"]
        recs = chunks.get(uid, [])
        ssims = [r.ssim_of_chunk for r in recs]
        users.append(UserMetrics(
            user_id=uid, controller=u["controller"], curve=u["curve"], chunks=len(recs),
            average_ssim=math.fsum(ssims) / len(ssims) if ssims else None,
            delta_ssim=compute_delta_ssim(ssims) if len(ssims) >= 2 else None,
            mean_bitrate=math.fsum(r.bitrate for r in recs) / len(recs) if recs else None,
            underruns=under.get(uid, 0),
        ))

    avg = [u.average_ssim for u in users if u.average_ssim is not None]
    dss = [u.delta_ssim for u in users if u.delta_ssim is not None]
    usage = compute_capacity_usage(trace)
    mean_cap = _mean_capacity(meta, warmup, duration)
    requested = math.fsum(u.mean_bitrate for u in users if u.mean_bitrate is not None)
    return SummaryMetrics(
        users=tuple(users),
        average_ssim=BoxStats.of(avg) if avg else None,
        delta_ssim=BoxStats.of(dss) if dss else None,
        capacity_usage=usage.has,
        cross_usage=usage.cross,
        requested_rate_fraction=requested / mean_cap,
        underruns=sum(under.values()),
        mean_price=math.fsum(prices) / len(prices) if prices else 0.0,
    )
