import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aggmark.cashflow import (
    PaymentSpec,
    expected_cashflow_general,
    expected_cashflow_reset,
    fast_path_cashflow,
    reserve,
    reward_matrix,
    write_cashflow_csv,
)
from aggmark.catalogue import Constant, PiecewiseConstant
from aggmark.errors import DomainError, UsageError, ValidationError
from aggmark.model import BALANCE, ResetStructure, build_from_reset
from aggmark.mpp import History
from aggmark.prodint import TimeGrid
from aggmark.sim import DiscountedPayments, HistoryStart, estimate
from aggmark.synthetic import random_generator, term_insurance, waiting_period_annuity

from oracles import markov_chain_valuation


def grid(a, b, n):
    return TimeGrid.uniform(a, b, n, 10)


def constant_two_state(mu):
    rs = ResetStructure({(1, 2): [Constant(mu)]}, {2: [1.0]})
    return build_from_reset([1, 1], {1: [[BALANCE]], 2: [[0.0]]}, rs, [1.0])


def test_zero_payments_give_zero_table(disability2):
    pay = PaymentSpec(horizon=65.0, interest=0.02)
    tab = expected_cashflow_reset(disability2, None, 1.0, 40.0, grid(40, 65, 50), pay)
    assert np.all(tab.rate == 0) and np.all(tab.discounted == 0)
    assert reward_matrix(disability2, pay, 50.0, 1.0).tolist() == np.zeros((4, 4)).tolist()


def test_reward_matrix_sojourn(disability2):
    pay = PaymentSpec(sojourn={2: 1.0}, horizon=65)
    R = reward_matrix(disability2, pay, 50.0, 1.0)
    np.testing.assert_array_equal(R, np.diag([0.0, 1.0, 1.0, 0.0]))


def test_reward_matrix_death_benefit():
    mu = 0.03
    m = constant_two_state(mu)
    R = reward_matrix(m, PaymentSpec(transition={(1, 2): 1.0}, horizon=10), 1.0, 0.0)
    np.testing.assert_allclose(R, [[0.0, mu], [0.0, 0.0]])


def test_payments_vanish_after_horizon():
    pay = PaymentSpec(sojourn={1: 2.0}, transition={(1, 2): 1.0}, horizon=10)
    assert pay.sojourn_rate(1, 10.5, 0.0) == 0
    assert pay.transition_payment(1, 2, 10.5, 0.0) == 0
    assert pay.sojourn_rate(1, 10.0, 0.0) == 2.0


def test_duration_flag_checked():
    with pytest.raises(ValidationError):
        PaymentSpec(sojourn={2: {"duration": PiecewiseConstant([0.25], [0, 1]).to_dict()}}, horizon=65, duration_independent=True)


def test_annuity_closed_form():
    m = build_from_reset([1], {1: [[0.0]]}, ResetStructure({}, {1: [1.0]}), [1.0])
    r, t, eta = 0.03, 40.0, 65.0
    pay = PaymentSpec(sojourn={1: 1.0}, horizon=eta, interest=r, duration_independent=True)
    tab = expected_cashflow_reset(m, 1, 0.0, t, grid(t, eta, 1200), pay)
    assert tab.reserve[0] == pytest.approx((1 - np.exp(-r * (eta - t))) / r, rel=1e-6)


def test_term_insurance_closed_form():
    mu, r, t, eta = 0.02, 0.03, 40.0, 65.0
    m = constant_two_state(mu)
    pay = PaymentSpec(transition={(1, 2): 1.0}, horizon=eta, interest=r)
    # state 1 is never re-entered, so the duration equals the age
    tab = expected_cashflow_reset(m, 1, t, t, grid(t, eta, 1200), pay)
    expect = mu * (1 - np.exp(-(r + mu) * (eta - t))) / (r + mu)
    assert tab.reserve[0] == pytest.approx(expect, rel=1e-6)


def test_zero_interest_reserve_is_total(chain):
    pay = term_insurance(interest=0.0)
    tab = expected_cashflow_reset(chain, 1, 0.0, 40.0, grid(40, 65, 100), pay)
    assert tab.reserve[0] == pytest.approx(tab.accumulated[0, -1], abs=1e-14)
    np.testing.assert_allclose(reserve(tab, 0.0), tab.accumulated[:, -1], atol=1e-14)


def test_reserve_function_matches_table(disability2):
    pay = waiting_period_annuity()
    tab = expected_cashflow_reset(disability2, 2, 1.0, 40.0, grid(40, 65, 100), pay)
    np.testing.assert_allclose(reserve(tab, pay.interest), tab.reserve, atol=1e-14)


def test_markov_chain_reduction(chain):
    t, eta, r = 40.0, 65.0, 0.02
    pay = term_insurance(horizon=eta, interest=r, premium=0.01)
    g = grid(t, eta, 300)
    tab = expected_cashflow_reset(chain, [1, 2], 0.0, t, g, pay)
    sojourn = lambda s: np.array([-0.01, 0.0, 0.0])
    B = np.array([[0, 0, 1.0], [0, 0, 1.0], [0, 0, 0]])
    fast = fast_path_cashflow(chain, [(1, 0.0), (2, 0.0)], t, g, pay)
    for row, start in enumerate((0, 1)):
        rates, _, disc = markov_chain_valuation(chain, sojourn, lambda s: B, r, t, g.points, start)
        # rates are right limits at breakpoints; the horizon needs the left one
        np.testing.assert_allclose(tab.rate[row, :-1], rates[:-1], atol=1e-6)
        np.testing.assert_allclose(fast.rate[row, :-1], rates[:-1], atol=1e-9)
        assert tab.rate_left[row, -1] == pytest.approx(rates[-1], abs=1e-6)
        assert fast.rate_left[row, -1] == pytest.approx(rates[-1], abs=1e-9)
        # trapezoid discounting on a monthly grid
        assert fast.reserve[row] == pytest.approx(disc[-1], abs=2e-5)


def test_nonnegative_payments_nonnegative_results(disability2):
    tab = expected_cashflow_reset(disability2, None, 0.5, 40.0, grid(40, 65, 100), waiting_period_annuity())
    assert np.all(tab.rate >= 0) and np.all(tab.reserve >= 0)
    assert np.all(np.diff(tab.accumulated, axis=1) >= 0)


def test_linearity(disability2):
    g = grid(40, 65, 100)
    p1 = waiting_period_annuity()
    p2 = PaymentSpec(sojourn={1: -0.3}, transition={(1, 3): 2.0, (2, 1): 0.5}, horizon=65, interest=0.02)
    a = expected_cashflow_reset(disability2, None, 1.0, 40.0, g, p1)
    b = expected_cashflow_reset(disability2, None, 1.0, 40.0, g, p2)
    c = expected_cashflow_reset(disability2, None, 1.0, 40.0, g, p1.plus(p2))
    np.testing.assert_allclose(c.rate, a.rate + b.rate, atol=1e-10)
    np.testing.assert_allclose(c.reserve, a.reserve + b.reserve, atol=1e-10)


def test_quadratures_agree(disability2):
    g = grid(40, 65, 300)
    pay = waiting_period_annuity()
    a = expected_cashflow_reset(disability2, 2, 1.0, 40.0, g, pay, quadrature="trapezoid")
    b = expected_cashflow_reset(disability2, 2, 1.0, 40.0, g, pay, quadrature="stieltjes")
    assert abs(a.reserve[0] - b.reserve[0]) < 1e-3


def test_general_reduces_to_reset(disability2):
    g = grid(40, 65, 100)
    pay = waiting_period_annuity()
    h = History.from_pairs([(30.0, 2), (31.0, 1), (39.0, 2)])
    gen = expected_cashflow_general(disability2, h, 40.0, g, pay)
    res = expected_cashflow_reset(disability2, 2, 1.0, 40.0, g, pay, quadrature="stieltjes")
    np.testing.assert_allclose(gen.rate, res.rate, atol=1e-10)
    np.testing.assert_allclose(gen.reserve, res.reserve, atol=1e-10)


def test_general_equals_fast_for_duration_free(general_model):
    g = grid(3, 10, 84)
    pay = PaymentSpec(sojourn={1: -1.0, 2: 1.0}, transition={(1, 2): 0.5}, horizon=10, interest=0.03, duration_independent=True)
    h = History.from_pairs([(1.0, 2), (2.5, 1)])
    gen = expected_cashflow_general(general_model, h, 3.0, g, pay)
    fast = fast_path_cashflow(general_model, h, 3.0, g, pay)
    np.testing.assert_allclose(gen.rate, fast.rate, atol=1e-8)
    np.testing.assert_allclose(gen.reserve, fast.reserve, atol=1e-8)


def test_general_model_vs_simulation(general_model):
    pay = PaymentSpec(
        sojourn={1: -1.0, 2: {"time": 1.0, "duration": PiecewiseConstant([0.5], [0.0, 1.0]).to_dict()}},
        horizon=10,
        interest=0.03,
    )
    h = History.from_pairs([(1.0, 2), (2.5, 1)])
    tab = expected_cashflow_general(general_model, h, 3.0, grid(3, 10, 168), pay)
    mean, se = estimate(general_model, HistoryStart(h, until=3.0), DiscountedPayments(pay, 3.0), 50_000, seed=13)
    assert abs(tab.reserve[0] - mean[0]) < 3 * se[0]


def test_fast_path_requires_flag(chain):
    pay = PaymentSpec(sojourn={1: 1.0}, horizon=65)
    with pytest.raises(UsageError):
        fast_path_cashflow(chain, (1, 0.0), 40.0, None, pay)


def test_grid_must_span_interval(chain):
    with pytest.raises(DomainError):
        expected_cashflow_reset(chain, 1, 0.0, 40.0, grid(40, 50, 10), term_insurance())


def test_csv_layout(tmp_path, chain):
    tab = expected_cashflow_reset(chain, [1, 2], 0.0, 40.0, grid(40, 65, 25), term_insurance())
    path = tmp_path / "cf.csv"
    write_cashflow_csv(path, [tab], "config_sha256=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_sha256=abc"
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["initial_state", "initial_duration", "s", "rate", "accumulated", "discounted"]
    assert len(rows) == 1 + 2 * 26
    assert float(rows[-1][5]) == tab.reserve[1]


def random_reset_model(seed, d2):
    r = np.random.default_rng(seed)
    beta = {(1, 2): [Constant(float(r.uniform(0.05, 0.5)))], (1, 3): [Constant(float(r.uniform(0.01, 0.1)))]}
    beta[(2, 1)] = [Constant(float(x)) for x in r.uniform(0.0, 1.0, d2)]
    beta[(2, 3)] = [Constant(float(x)) for x in r.uniform(0.01, 0.2, d2)]
    inner = random_generator(r, d2, 1.0)
    block = [[BALANCE if a == b else float(inner[a, b]) for b in range(d2)] for a in range(d2)]
    pi2 = list(r.dirichlet(np.ones(d2)))
    rs = ResetStructure(beta, {1: [1.0], 2: pi2, 3: [1.0]})
    return build_from_reset([1, d2, 1], {1: [[BALANCE]], 2: block, 3: [[0.0]]}, rs, [1.0])


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.floats(0.0, 3.0))
def test_fast_path_equivalence(seed, d2, u):
    m = random_reset_model(seed, d2)
    pay = PaymentSpec(sojourn={1: -0.2, 2: 1.0}, transition={(1, 2): 0.3, (2, 3): 2.0}, horizon=10, interest=0.01, duration_independent=True)
    g = grid(5, 10, 300)
    slow = expected_cashflow_reset(m, [1, 2], u, 5.0, g, pay, quadrature="stieltjes")
    fast = fast_path_cashflow(m, [(1, u), (2, u)], 5.0, g, pay)
    np.testing.assert_allclose(slow.rate, fast.rate, atol=1e-6)
    np.testing.assert_allclose(slow.reserve, fast.reserve, atol=1e-6)
