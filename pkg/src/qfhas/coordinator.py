"""Price coordinator: max-pools downloading-time reports and runs a PI price update.

The coordinator keeps no per-user state. Reports only raise the running
maximum; once per chunk duration :meth:`Coordinator.tick` turns that maximum
into a new price and resets it.
"""
from __future__ import annotations

from dataclasses import dataclass

from qfhas.errors import DomainError


@dataclass(frozen=True)
class CoordinatorConfig:
    gamma: float = 0.95
    alpha_e: float = 0.75
    k_p: float = 1.0
    k_i: float = 0.25
    chunk_duration: float = 2.0

    def __post_init__(self):
        if not (0 < self.gamma <= 1):
            raise DomainError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not (0 <= self.alpha_e < 1):
            raise DomainError(f"alpha_e must lie in [0, 1), got {self.alpha_e}")
        if self.k_p < 0 or self.k_i < 0:
            raise DomainError("gains must be non-negative")
        if not self.chunk_duration > 0:
            raise DomainError(f"chunk_duration must be positive, got {self.chunk_duration}")

    @property
    def reference(self) -> float:
        return self.gamma * self.chunk_duration


@dataclass
class CoordinatorState:
    tau_max: float = 0.0
    e_filtered: float = 0.0
    e_integral: float = 0.0
    price: float = 0.0
    raw_error: float = 0.0


class Coordinator:
    def __init__(self, config: CoordinatorConfig | None = None, state: CoordinatorState | None = None):
        self.config = config or CoordinatorConfig()
        self.state = state or CoordinatorState()

    @property
    def price(self) -> float:
        return self.state.price

    def on_measurement(self, reported_time: float) -> float:
        """Fold one report into the running maximum and return the current price."""
        if not reported_time >= 0:
            raise DomainError(f"reported time must be non-negative, got {reported_time}")
        st = self.state
        if reported_time > st.tau_max:
            st.tau_max = reported_time
        return st.price

    def tick(self) -> float:
        """Periodic price update; an empty period counts as ``tau_max = 0``."""
        st, cfg = self.state, self.config
        st.raw_error = st.tau_max - cfg.reference
        st.e_filtered = cfg.alpha_e * st.e_filtered + (1 - cfg.alpha_e) * st.raw_error
        # clamp at zero: anti-windup
        st.e_integral = max(0.0, st.e_integral + st.e_filtered)
        st.price = max(0.0, cfg.k_p * st.e_filtered + cfg.k_i * st.e_integral)
        st.tau_max = 0.0
        return st.price
