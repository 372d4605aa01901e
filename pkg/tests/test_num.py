import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from _oracles import grid_search_num
from qfhas.errors import DivergenceError, DomainError
from qfhas.num import (
    DualIterateConfig, NumProblem, aggregate_utility, dual_step_rate, dual_step_time, ideal_tau_map,
    iterate_to_convergence, primal_step, reference_price, solve_oracle,
)
from qfhas.utility import PRESETS, UtilityCurve, evaluate, marginal, random_curve

SPORT, CARTOON, LECTURE = PRESETS["sport"], PRESETS["cartoon"], PRESETS["lecture"]

curve_st = st.builds(UtilityCurve, a=st.floats(1e-3, 1.0), b=st.floats(0.1, 0.6), c=st.floats(0, 0.5))
problem_st = st.builds(
    NumProblem,
    curves=st.lists(curve_st, min_size=1, max_size=8).map(tuple),
    capacity=st.floats(1e5, 1e8),
)


def test_problem_validation():
    with pytest.raises(DomainError):
        NumProblem((), 1e6)
    with pytest.raises(DomainError):
        NumProblem((SPORT,), 0.0)


def test_primal_step_identical_curves_get_equal_rates():
    r = primal_step(NumProblem((SPORT, SPORT), 5e6), 1e-8)
    assert r[0] == r[1]


def test_primal_step_closed_form():
    prob = NumProblem((UtilityCurve(2.0, 0.5, 0.0), UtilityCurve(1.0, 0.5, 0.0)), 5.0)
    assert primal_step(prob, 0.5) == pytest.approx([4.0, 1.0], rel=1e-15)


@given(problem_st, st.floats(1e-10, 1.0))
def test_primal_step_decreases_when_price_doubles(prob, price):
    lo, hi = primal_step(prob, price), primal_step(prob, 2 * price)
    assume(all(np.isfinite(lo)) and all(v > 0 for v in hi))
    assert all(h < l for h, l in zip(hi, lo))


def test_primal_step_rejects_zero_price():
    with pytest.raises(DomainError):
        primal_step(NumProblem((SPORT,), 1e6), 0.0)


def test_dual_step_rate_examples():
    assert dual_step_rate(1.0, 6.0, 5.0, 0.1) == pytest.approx(1.1)
    assert dual_step_rate(0.05, 4.0, 5.0, 0.1) == 0.0
    assert dual_step_rate(0.7, 5.0, 5.0, 0.1) == 0.7


def test_dual_step_time_examples():
    assert dual_step_time(1.0, 2.5, 0.1, 2.0) == pytest.approx(1.05)
    assert dual_step_time(0.7, 2.0, 0.1, 2.0) == 0.7
    assert dual_step_time(0.01, 1.0, 0.1, 2.0) == 0.0


def test_dual_steps_reject_bad_inputs():
    with pytest.raises(DomainError):
        dual_step_rate(-1.0, 1.0, 1.0, 0.1)
    with pytest.raises(DomainError):
        dual_step_time(1.0, -1.0, 0.1, 2.0)


@given(st.floats(0, 10), st.floats(0, 1e7), st.floats(1, 1e7), st.floats(1e-9, 1.0))
def test_dual_rate_update_is_monotone(price, rate_sum, cap, beta):
    new = dual_step_rate(price, rate_sum, cap, beta)
    assert new >= 0
    if rate_sum > cap and beta * (rate_sum - cap) > 1e-12 * max(price, 1):
        assert new > price
    if rate_sum < cap and price > 0:
        assert new < price or new == 0


@given(st.lists(st.floats(1.0, 1e7), min_size=1, max_size=10), st.floats(1.0, 1e8))
def test_rate_time_constraint_equivalence_is_exact(rates, cap):
    prob = NumProblem(tuple(SPORT for _ in rates), cap)
    tau = ideal_tau_map(prob, 2.0)(rates)
    assert (sum(rates) <= cap) == (tau <= 2.0)


def test_rate_time_equivalence_at_the_boundary():
    cap = 5e6
    prob = NumProblem((SPORT, SPORT), cap)
    tau = ideal_tau_map(prob, 2.0)
    assert tau([2.5e6, 2.5e6]) == 2.0
    assert tau([np.nextafter(5e6, 1e7)]) > 2.0
    assert tau([np.nextafter(5e6, 0.0)]) < 2.0


# -- oracle -----------------------------------------------------------------

def test_oracle_two_identical_users():
    sol = solve_oracle(NumProblem((CARTOON, CARTOON), 4e6))
    assert sol.rates == pytest.approx((2e6, 2e6), rel=1e-9)


def test_oracle_single_user():
    sol = solve_oracle(NumProblem((SPORT,), 5e6))
    assert sol.rates[0] == pytest.approx(5e6, rel=1e-9)
    assert sol.price == pytest.approx(marginal(SPORT, 5e6), rel=1e-9)


def test_oracle_matches_grid_search_three_users():
    prob = NumProblem((SPORT, CARTOON, LECTURE), 5e6)
    sol = solve_oracle(prob)
    grid_rates, grid_u = grid_search_num(prob.curves, prob.capacity, step=1e4)
    for r, g in zip(sol.rates, grid_rates):
        assert abs(r - g) <= 1e4
    assert sol.aggregate_utility >= grid_u - 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_oracle_beats_every_grid_point(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    # capacity on the 10 kbps grid so every grid point is feasible
    cap = float(round(rng.uniform(1e6, 6e6), -4))
    prob = NumProblem(tuple(random_curve(rng) for _ in range(n)), cap)
    sol = solve_oracle(prob)
    grid_rates, grid_u = grid_search_num(prob.curves, prob.capacity, step=1e4)
    assert sol.aggregate_utility >= grid_u - 1e-12
    assert max(abs(r - g) for r, g in zip(sol.rates, grid_rates)) <= 1e4


@given(problem_st, st.sampled_from([1e-9, 1e-6, 1e-3]))
def test_oracle_kkt(prob, tol):
    sol = solve_oracle(prob, tol=tol)
    lam = sol.price
    assert lam >= 0
    assert all(r > 0 for r in sol.rates)
    assert max(abs(marginal(c, r) - lam) / lam for c, r in zip(prob.curves, sol.rates)) <= tol
    assert abs(sum(sol.rates) - prob.capacity) / prob.capacity <= tol
    assert sum(sol.rates) <= prob.capacity * (1 + 1e-9)


@pytest.mark.parametrize("tol", [0.0, 0.02, -1e-3])
def test_oracle_rejects_bad_tolerance(tol):
    with pytest.raises(DomainError):
        solve_oracle(NumProblem((SPORT,), 1e6), tol=tol)


# -- iterations -------------------------------------------------------------

def test_symmetric_iteration_matches_oracle():
    prob = NumProblem((CARTOON, CARTOON), 4e6)
    res = iterate_to_convergence(prob, mode="rate")
    ref = solve_oracle(prob)
    assert res.converged and res.iterations <= 5000
    assert res.solution.rates == pytest.approx(ref.rates, rel=0.01)


def test_time_mode_matches_rate_mode():
    prob = NumProblem((SPORT, CARTOON, LECTURE), 5e6)
    a = iterate_to_convergence(prob, mode="rate")
    b = iterate_to_convergence(prob, mode="time")
    assert a.converged and b.converged
    assert b.solution.rates == pytest.approx(a.solution.rates, rel=0.01)
    assert b.solution.price == pytest.approx(a.solution.price, rel=0.01)


def test_zero_step_keeps_price_constant():
    prob = NumProblem((SPORT, LECTURE), 5e6)
    res = iterate_to_convergence(prob, DualIterateConfig(beta=0.0), mode="time", initial_price=3e-8)
    assert set(res.prices) == {3e-8}
    assert res.solution.price == 3e-8


def test_zero_step_started_at_optimum_stays_there():
    prob = NumProblem((SPORT, LECTURE), 5e6)
    ref = solve_oracle(prob)
    res = iterate_to_convergence(prob, DualIterateConfig(beta=0.0), initial_price=ref.price)
    assert res.solution.rates == pytest.approx(ref.rates, rel=1e-9)


def test_huge_step_diverges():
    prob = NumProblem((SPORT, LECTURE), 5e6)
    with pytest.raises(DivergenceError):
        iterate_to_convergence(prob, DualIterateConfig(beta=1e30), mode="rate")


def test_negative_step_rejected():
    with pytest.raises(DomainError):
        DualIterateConfig(beta=-1.0)


def test_unknown_mode_rejected():
    with pytest.raises(DomainError):
        iterate_to_convergence(NumProblem((SPORT,), 1e6), mode="packets")


def test_custom_tau_map_is_used():
    prob = NumProblem((SPORT, LECTURE), 5e6)
    # a link that only delivers 80% of nominal capacity
    res = iterate_to_convergence(prob, mode="time", tau_map=lambda r: 2.0 * sum(r) / (0.8 * 5e6))
    assert sum(res.solution.rates) == pytest.approx(0.8 * 5e6, rel=1e-3)


def test_reference_price_is_first_user_marginal_at_fair_share():
    prob = NumProblem((SPORT, LECTURE), 5e6)
    assert reference_price(prob) == marginal(SPORT, 2.5e6)


# -- aggregate utility ------------------------------------------------------

def test_aggregate_single_user_equals_evaluate():
    assert aggregate_utility(NumProblem((SPORT,), 1e6), [1e6]) == evaluate(SPORT, 1e6)


def test_aggregate_is_permutation_invariant():
    p1 = NumProblem((SPORT, CARTOON, LECTURE), 5e6)
    p2 = NumProblem((LECTURE, SPORT, CARTOON), 5e6)
    u1 = aggregate_utility(p1, [2e6, 1.5e6, 1.5e6])
    u2 = aggregate_utility(p2, [1.5e6, 2e6, 1.5e6])
    assert u1 == pytest.approx(u2, rel=1e-15)


def test_aggregate_length_mismatch():
    with pytest.raises(DomainError):
        aggregate_utility(NumProblem((SPORT, CARTOON), 5e6), [1e6])
