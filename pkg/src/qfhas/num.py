"""Single-bottleneck network utility maximization.

maximize sum_i U_i(r_i) subject to sum_i r_i <= C

Two dual iterations are provided: the textbook one that needs ``C`` and the
downloading-time one that only needs the largest downloading time. The
bisection solver in :func:`solve_oracle` is independent of both and is what
the tests treat as ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

from qfhas.errors import DivergenceError, DomainError, SolverError
from qfhas.utility import UtilityCurve, evaluate, inverse_marginal, marginal

DIVERGENCE_PRICE = 1e12


@dataclass(frozen=True)
class NumProblem:
    curves: tuple[UtilityCurve, ...]
    capacity: float

    def __post_init__(self):
        object.__setattr__(self, "curves", tuple(self.curves))
        if len(self.curves) < 1:
            raise DomainError("a problem needs at least one user")
        if not self.capacity > 0:
            raise DomainError(f"capacity must be positive, got {self.capacity}")

    @property
    def n(self) -> int:
        return len(self.curves)


@dataclass(frozen=True)
class DualIterateConfig:
    # None selects the scale-relative default, see default_beta().
    beta: float | None = None
    chunk_duration: float = 2.0

    def __post_init__(self):
        if self.beta is not None and not self.beta >= 0:
            raise DomainError(f"beta must be non-negative, got {self.beta}")
        if not self.chunk_duration > 0:
            raise DomainError(f"chunk_duration must be positive, got {self.chunk_duration}")


@dataclass(frozen=True)
class NumSolution:
    rates: tuple[float, ...]
    price: float
    aggregate_utility: float


@dataclass
class IterateResult:
    solution: NumSolution
    prices: list[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def aggregate_utility(problem: NumProblem, rates: Sequence[float]) -> float:
    if len(rates) != problem.n:
        raise DomainError(f"expected {problem.n} rates, got {len(rates)}")
    return sum(evaluate(c, r) for c, r in zip(problem.curves, rates))


def primal_step(problem: NumProblem, price: float) -> list[float]:
    if not price > 0:
        raise DomainError(f"price must be positive, got {price}")
    return [inverse_marginal(c, price) for c in problem.curves]


def dual_step_rate(price: float, rate_sum: float, capacity: float, beta: float) -> float:
    if price < 0:
        raise DomainError(f"price must be non-negative, got {price}")
    return max(0.0, price + beta * (rate_sum - capacity))


def dual_step_time(price: float, tau_max: float, beta: float, chunk_duration: float) -> float:
    if price < 0:
        raise DomainError(f"price must be non-negative, got {price}")
    if tau_max < 0:
        raise DomainError(f"tau_max must be non-negative, got {tau_max}")
    return max(0.0, price + beta * (tau_max - chunk_duration))


def ideal_tau_map(problem: NumProblem, chunk_duration: float) -> Callable[[Sequence[float]], float]:
    """Largest downloading time under perfectly equal sharing with aligned requests."""

    def tau_max(rates):
        # dividing first keeps (sum <= C) <=> (tau <= T_ck) exact in floating point
        return chunk_duration * (sum(rates) / problem.capacity)

    return tau_max


def reference_price(problem: NumProblem) -> float:
    return marginal(problem.curves[0], problem.capacity / problem.n)


def default_beta(problem: NumProblem, config: DualIterateConfig, mode: str) -> float:
    """Step size relative to the price scale.

    The time-based step is ``0.1 * lambda0 / T_ck``; the rate-based step is
    the same step pulled through the ideal map (``d tau / d sum r = T_ck / C``)
    so that both iterations move identically on an ideal link.
    """
    lam0 = reference_price(problem)
    if mode == "time":
        return 0.1 * lam0 / config.chunk_duration
    return 0.1 * lam0 / problem.capacity


def solve_oracle(problem: NumProblem, tol: float = 1e-9, max_iter: int = 500) -> NumSolution:
    """Bisect on the price until the rate sum meets the capacity.

    ``sum_i [U_i']^{-1}(lambda)`` is strictly decreasing in lambda, so the
    optimum is the unique root of ``sum_i r_i(lambda) = C``.
    """
    if not (0 < tol <= 0.01):
        raise DomainError(f"tol must lie in (0, 0.01], got {tol}")
    cap = problem.capacity

    def excess(lam):
        return sum(primal_step(problem, lam)) - cap

    # at lo every user alone would take >= C; at hi each takes <= C/N
    lo = min(marginal(c, cap) for c in problem.curves)
    hi = max(marginal(c, cap / problem.n) for c in problem.curves)
    for _ in range(200):
        if excess(lo) >= 0:
            break
        lo /= 2
    for _ in range(200):
        if excess(hi) <= 0:
            break
        hi *= 2
    if not (excess(lo) >= 0 >= excess(hi)):
        raise SolverError(f"could not bracket the optimal price (lo={lo:g}, hi={hi:g})")

    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        ex = excess(mid)
        if ex > 0:
            lo = mid
        else:
            hi = mid
        if abs(excess(hi)) <= tol * cap and hi / lo - 1 <= tol:
            break
    else:
        raise SolverError("bisection did not reach the requested tolerance")

    rates = primal_step(problem, hi)
    return NumSolution(tuple(rates), hi, aggregate_utility(problem, rates))


def iterate_to_convergence(
    problem: NumProblem,
    config: DualIterateConfig = DualIterateConfig(),
    mode: Literal["rate", "time"] = "rate",
    tau_map: Callable[[Sequence[float]], float] | None = None,
    max_iters: int = 5000,
    initial_price: float | None = None,
    rtol: float = 1e-6,
) -> IterateResult:
    """Run the primal/dual recursion until the price settles.

    A projected price of exactly zero would send the primal step to infinity;
    it is floored at ``1e-9 * lambda0`` for the next primal step only.
    """
    if mode not in ("rate", "time"):
        raise DomainError(f"unknown mode {mode!r}")
    beta = config.beta if config.beta is not None else default_beta(problem, config, mode)
    if mode == "time" and tau_map is None:
        tau_map = ideal_tau_map(problem, config.chunk_duration)
    lam0 = reference_price(problem)
    floor = 1e-9 * lam0
    lam = lam0 if initial_price is None else initial_price

    prices = [lam]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        rates = primal_step(problem, max(lam, floor))
        if mode == "rate":
            new = dual_step_rate(lam, sum(rates), problem.capacity, beta)
        else:
            new = dual_step_time(lam, tau_map(rates), beta, config.chunk_duration)
        if not math.isfinite(new) or new > DIVERGENCE_PRICE:
            raise DivergenceError(f"price diverged to {new:g} after {it} iterations")
        prices.append(new)
        done = abs(new - lam) <= rtol * lam if lam > 0 else new == 0
        lam = new
        if done:
            converged = True
            break

    rates = primal_step(problem, max(lam, floor))
    sol = NumSolution(tuple(rates), lam, aggregate_utility(problem, rates))
    return IterateResult(sol, prices, converged, it)
