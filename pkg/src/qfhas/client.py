"""Client-side bitrate selection.

Two controllers share the same buffer discount, ladder quantization and
one-step switch limiting:

* the quality-fair controller turns the coordinator price into an ideal rate
  through the inverse marginal utility, falls back to measured throughput
  when the buffer is low, and reports a quantization-corrected downloading
  time back to the coordinator;
* the rate-fair baseline follows its filtered throughput estimate and never
  talks to the coordinator.

The per-chunk work is split into :func:`observe_download` (runs when a chunk
finishes: throughput, downloading-time and quantization filters) and
:func:`decide` (runs when the next request can be issued).
:func:`select_chunk` chains both and is the whole per-chunk step in one call.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass

from qfhas.errors import DomainError, GatingError
from qfhas.utility import UtilityCurve, inverse_marginal

DEFAULT_LEVELS_KBPS = (400, 640, 880, 1200, 1680, 2240, 2800, 3600, 4400, 6000)


@dataclass(frozen=True)
class BitrateLadder:
    levels: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        if not self.levels:
            raise DomainError("ladder must not be empty")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise DomainError("ladder levels must be strictly increasing")
        if self.levels[0] <= 0:
            raise DomainError("ladder levels must be positive")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    @property
    def top(self) -> float:
        return self.levels[-1]

    @property
    def bottom(self) -> float:
        return self.levels[0]

    def floor_index(self, rate: float) -> int:
        """Index of the largest level <= rate, or 0 when every level is above it."""
        return max(bisect.bisect_right(self.levels, rate) - 1, 0)


DEFAULT_LADDER = BitrateLadder(tuple(k * 1000.0 for k in DEFAULT_LEVELS_KBPS))


@dataclass(frozen=True)
class ClientConfig:
    # Price normalizer for rates in bits/s; equals 1e6 with rates in kbit/s.
    kappa: float = 1e9
    alpha_tcp: float = 0.75
    alpha_q: float = 0.75
    alpha_tau: float = 0.75
    ladder: BitrateLadder = DEFAULT_LADDER
    buffer_capacity_chunks: int = 10
    chunk_duration: float = 2.0
    low_buffer_fraction: float = 0.6
    discount_pivot_fraction: float = 0.7
    discount_floor: float = 0.25
    tau_clip_factor: float = 1.25
    # False requests r*delta directly (capped at the ladder top), no switch limit.
    quantize: bool = True

    def __post_init__(self):
        if not self.kappa > 0:
            raise DomainError(f"kappa must be positive, got {self.kappa}")
        for name in ("alpha_tcp", "alpha_q", "alpha_tau"):
            v = getattr(self, name)
            if not (0 <= v < 1):
                raise DomainError(f"{name} must lie in [0, 1), got {v}")
        for name in ("low_buffer_fraction", "discount_pivot_fraction"):
            v = getattr(self, name)
            if not (0 < v <= 1):
                raise DomainError(f"{name} must lie in (0, 1], got {v}")
        if not (0 < self.discount_floor < 1):
            raise DomainError(f"discount_floor must lie in (0, 1), got {self.discount_floor}")
        if self.buffer_capacity_chunks < 1:
            raise DomainError("buffer must hold at least one chunk")
        if not self.chunk_duration > 0:
            raise DomainError("chunk_duration must be positive")
        if not self.tau_clip_factor > 0:
            raise DomainError("tau_clip_factor must be positive")

    @property
    def buffer_capacity(self) -> float:
        return self.buffer_capacity_chunks * self.chunk_duration


@dataclass
class ClientState:
    last_level: int = 0
    last_ideal_rate: float | None = None
    last_bitrate: float | None = None
    r_tcp: float | None = None
    tau: float = 2.0
    q: float = 1.0
    last_throughput_update: float | None = None
    last_download_time: float | None = None
    chunks_requested: int = 0

    @classmethod
    def initial(cls, config: ClientConfig) -> "ClientState":
        return cls(tau=config.chunk_duration)


@dataclass(frozen=True)
class ChunkDecision:
    level: int
    bitrate: float
    report_time: float
    ideal_rate: float | None = None
    price: float | None = None


def compute_ideal_rate(config: ClientConfig, curve: UtilityCurve, price: float) -> float:
    """Inverse marginal utility at ``price / kappa``; a zero price saturates at the ladder top."""
    if price < 0:
        raise DomainError(f"price must be non-negative, got {price}")
    if price == 0:
        return config.ladder.top
    return inverse_marginal(curve, price / config.kappa)


def update_throughput_estimate(state: ClientState, config: ClientConfig, measured_rate: float,
                               elapsed: float, now: float | None = None) -> float:
    """EWMA of chunk throughput whose memory scales with the time since the last update."""
    if not measured_rate > 0:
        raise DomainError(f"measured rate must be positive, got {measured_rate}")
    if elapsed < 0:
        raise DomainError(f"elapsed must be non-negative, got {elapsed}")
    if state.r_tcp is None:
        state.r_tcp = measured_rate
    else:
        w = min(max(config.alpha_tcp * elapsed / config.chunk_duration, 0.0), 1.0)
        state.r_tcp = w * state.r_tcp + (1 - w) * measured_rate
    if now is not None:
        state.last_throughput_update = now
    return state.r_tcp


def compute_discount(buffer_level: float, config: ClientConfig) -> float:
    if buffer_level < 0:
        raise DomainError(f"buffer level must be non-negative, got {buffer_level}")
    pivot = config.discount_pivot_fraction * config.buffer_capacity
    return min(max(buffer_level / pivot, config.discount_floor), 1.0)


def buffer_has_slot(buffer_level: float, config: ClientConfig) -> bool:
    return buffer_level + config.chunk_duration <= config.buffer_capacity + 1e-9


def _check_gating(buffer_level, config, download_active):
    if download_active:
        raise GatingError("a download is already active")
    if not buffer_has_slot(buffer_level, config):
        raise GatingError(f"buffer full ({buffer_level:.3f} s stored)")


def _quantize(state: ClientState, config: ClientConfig, target: float) -> tuple[int, float]:
    ladder = config.ladder
    if not config.quantize:
        bitrate = min(target, ladder.top)
        return ladder.floor_index(bitrate), bitrate
    level = ladder.floor_index(target)
    if state.chunks_requested > 0:
        if level < state.last_level:
            level = max(state.last_level - 1, 0)
        elif level > state.last_level:
            level = min(state.last_level + 1, len(ladder) - 1)
    return level, ladder[level]


def observe_download(state: ClientState, config: ClientConfig, download_time: float,
                     measured_rate: float, now: float) -> float:
    """Fold a finished chunk into the filters; returns the corrected report ``q * tau``."""
    elapsed = 0.0 if state.last_throughput_update is None else now - state.last_throughput_update
    update_throughput_estimate(state, config, measured_rate, max(elapsed, 0.0), now)
    state.last_download_time = download_time
    tau_hat = min(download_time, config.tau_clip_factor * config.chunk_duration)
    state.tau = config.alpha_tau * state.tau + (1 - config.alpha_tau) * tau_hat
    if state.last_ideal_rate is not None and state.last_bitrate:
        q_hat = max(1.0, state.last_ideal_rate / state.last_bitrate)
        state.q = config.alpha_q * state.q + (1 - config.alpha_q) * q_hat
    return state.q * state.tau


def decide(state: ClientState, config: ClientConfig, curve: UtilityCurve, price: float,
           buffer_level: float, download_active: bool = False) -> ChunkDecision:
    _check_gating(buffer_level, config, download_active)
    r_coord = compute_ideal_rate(config, curve, price)
    if state.chunks_requested == 0:
        level, bitrate = 0, config.ladder.bottom
    else:
        r = r_coord
        low = config.low_buffer_fraction * config.buffer_capacity
        if state.r_tcp is not None and state.r_tcp < r_coord and buffer_level < low:
            r = state.r_tcp
        level, bitrate = _quantize(state, config, r * compute_discount(buffer_level, config))
    state.last_level = level
    state.last_ideal_rate = r_coord
    state.last_bitrate = bitrate
    state.chunks_requested += 1
    return ChunkDecision(level, bitrate, state.q * state.tau, r_coord, price)


def select_chunk(state: ClientState, config: ClientConfig, curve: UtilityCurve, price: float,
                 buffer_level: float, now: float, last_download: tuple[float, float] | None = None,
                 download_active: bool = False) -> ChunkDecision:
    """One full quality-fair step.

    ``last_download`` is ``(downloading_time, measured_throughput)`` of the
    chunk that just finished, or None before the first chunk.
    """
    _check_gating(buffer_level, config, download_active)
    if last_download is not None:
        observe_download(state, config, last_download[0], last_download[1], now)
    return decide(state, config, curve, price, buffer_level)


def observe_download_baseline(state: ClientState, config: ClientConfig, download_time: float,
                              measured_rate: float, now: float) -> float:
    elapsed = 0.0 if state.last_throughput_update is None else now - state.last_throughput_update
    update_throughput_estimate(state, config, measured_rate, max(elapsed, 0.0), now)
    state.last_download_time = download_time
    return download_time


def decide_baseline(state: ClientState, config: ClientConfig, buffer_level: float,
                    download_active: bool = False) -> ChunkDecision:
    _check_gating(buffer_level, config, download_active)
    if state.chunks_requested == 0 or state.r_tcp is None:
        level, bitrate = 0, config.ladder.bottom
    else:
        level, bitrate = _quantize(state, config, state.r_tcp * compute_discount(buffer_level, config))
    state.last_level = level
    state.last_bitrate = bitrate
    state.chunks_requested += 1
    raw = state.last_download_time if state.last_download_time is not None else config.chunk_duration
    return ChunkDecision(level, bitrate, raw)


def baseline_select(state: ClientState, config: ClientConfig, buffer_level: float, now: float,
                    last_download: tuple[float, float] | None = None,
                    download_active: bool = False) -> ChunkDecision:
    """One full rate-fair step: throughput estimate, discount, quantization, switch limit."""
    _check_gating(buffer_level, config, download_active)
    if last_download is not None:
        observe_download_baseline(state, config, last_download[0], last_download[1], now)
    return decide_baseline(state, config, buffer_level)


class QualityFairClient:
    """Stateful wrapper used by the simulator for one quality-fair user."""

    kind = "quality_fair"
    uses_coordinator = True

    def __init__(self, config: ClientConfig, curve: UtilityCurve):
        self.config = config
        self.curve = curve
        self.state = ClientState.initial(config)

    def observe(self, download_time: float, measured_rate: float, now: float) -> float:
        return observe_download(self.state, self.config, download_time, measured_rate, now)

    def decide(self, price: float, buffer_level: float) -> ChunkDecision:
        return decide(self.state, self.config, self.curve, price, buffer_level)


class RateFairClient:
    """Throughput-following baseline; ignores the price entirely."""

    kind = "rate_fair"
    uses_coordinator = False

    def __init__(self, config: ClientConfig, curve: UtilityCurve):
        self.config = config
        self.curve = curve
        self.state = ClientState.initial(config)

    def observe(self, download_time: float, measured_rate: float, now: float) -> float:
        return observe_download_baseline(self.state, self.config, download_time, measured_rate, now)

    def decide(self, price: float, buffer_level: float) -> ChunkDecision:
        return decide_baseline(self.state, self.config, buffer_level)


CONTROLLERS = {cls.kind: cls for cls in (QualityFairClient, RateFairClient)}


def register_controller(cls) -> None:
    """Plug in another controller class exposing ``kind``, ``observe`` and ``decide``."""
    CONTROLLERS[cls.kind] = cls
