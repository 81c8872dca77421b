import numpy as np
import pytest

from aggmark.cashflow import PaymentSpec, expected_cashflow_reset
from aggmark.catalogue import Constant, Logistic
from aggmark.errors import StructuralError, UsageError, ValidationError
from aggmark.model import validate
from aggmark.mpp import History
from aggmark.phb import BehaviourSpec, exercise_factor, scaled_cashflow, transform
from aggmark.prodint import TimeGrid
from aggmark.sim import DiscountedPayments, StateStart, estimate
from aggmark.synthetic import free_policy_payments, time_varying_rho

SPEC = BehaviourSpec([1], [2, 3], {(1, 2): 0.7})


def grid(n=150):
    return TimeGrid.uniform(40, 65, n, 10)


def test_transform_adds_absorbing_state(free_policy):
    mhat = transform(free_policy, SPEC)
    assert mhat.J == free_policy.J + 1
    assert mhat.micro_counts[-1] == 1
    assert validate(mhat, np.linspace(0, 100, 51)).ok
    M = mhat(50.0)
    np.testing.assert_allclose(M.sum(axis=1), 0.0, atol=1e-14)
    assert np.all(M[-1] == 0)


def test_split_conserves_mass(free_policy):
    mhat = transform(free_policy, SPEC)
    M, Mh = free_policy(50.0), mhat(50.0)
    s1, s2 = free_policy.slice(1), free_policy.slice(2)
    np.testing.assert_allclose(Mh[s1, s2], 0.7 * M[s1, s2])
    np.testing.assert_allclose(Mh[s1, -1], 0.3 * M[s1, s2].sum(axis=1))
    # blocks not leaving J0 for J1 are untouched
    np.testing.assert_allclose(Mh[s1, s1], M[s1, s1])
    np.testing.assert_allclose(Mh[s1, free_policy.slice(3)], M[s1, free_policy.slice(3)])


def test_rho_one_is_identity(free_policy):
    pay = free_policy_payments()
    spec = BehaviourSpec([1], [2, 3])
    base = expected_cashflow_reset(free_policy, 1, 40.0, 40.0, grid(), pay)
    scaled = scaled_cashflow(free_policy, spec, (1, 40.0), 40.0, grid(), pay)
    np.testing.assert_allclose(scaled.rate, base.rate, atol=1e-12)
    np.testing.assert_allclose(scaled.reserve, base.reserve, atol=1e-12)


def test_payments_only_before_exercise_unaffected(free_policy):
    pay = PaymentSpec(sojourn={1: -0.5}, transition={(1, 3): 10.0}, horizon=65, interest=0.02)
    base = expected_cashflow_reset(free_policy, 1, 40.0, 40.0, grid(), pay)
    scaled = scaled_cashflow(free_policy, SPEC, (1, 40.0), 40.0, grid(), pay)
    np.testing.assert_allclose(scaled.reserve, base.reserve, atol=1e-10)


def test_post_exercise_payments_scale_linearly(free_policy):
    # with rho constant, an annuity paid only in the free-policy state scales by rho
    pay = PaymentSpec(sojourn={2: 1.0}, horizon=65, interest=0.02)
    base = expected_cashflow_reset(free_policy, 1, 40.0, 40.0, grid(), pay)
    scaled = scaled_cashflow(free_policy, SPEC, (1, 40.0), 40.0, grid(), pay)
    assert scaled.reserve[0] == pytest.approx(0.7 * base.reserve[0], rel=1e-9)


@pytest.mark.parametrize("rho", [0.7, "logistic"])
def test_scaled_matches_simulation(free_policy, rho):
    f = time_varying_rho() if rho == "logistic" else Constant(rho)
    spec = BehaviourSpec([1], [2, 3], {(1, 2): f.to_dict()})
    pay = free_policy_payments()
    tab = scaled_cashflow(free_policy, spec, (1, 40.0), 40.0, grid(300), pay)
    mean, se = estimate(free_policy, StateStart(1, 40.0, 40.0), DiscountedPayments(pay, 40.0, spec), 40_000, seed=21)
    assert abs(tab.reserve[0] - mean[0]) < 3.5 * se[0]


def test_conditioning_after_exercise(free_policy):
    pay = free_policy_payments()
    with pytest.raises(UsageError):
        scaled_cashflow(free_policy, SPEC, (2, 1.0), 50.0, TimeGrid.uniform(50, 65, 60, 10), pay)
    tab = scaled_cashflow(free_policy, SPEC, (2, 1.0), 50.0, TimeGrid.uniform(50, 65, 60, 10), pay, exercise=(49.0, 1, 2))
    base = expected_cashflow_reset(free_policy, 2, 1.0, 50.0, TimeGrid.uniform(50, 65, 60, 10), pay)
    assert tab.reserve[0] == pytest.approx(0.7 * base.reserve[0], rel=1e-12)


def test_exercise_factor():
    spec = BehaviourSpec([1], [2, 3], {(1, 2): Logistic(0.9, 0.5, 0.4, 55.0).to_dict()})
    assert exercise_factor(spec, History.from_pairs([])) == 1.0
    assert exercise_factor(spec, History.from_pairs([(45.0, 2), (50.0, 3)])) == pytest.approx(spec.rho_value(45.0, 1, 2))
    assert exercise_factor(spec, History.from_pairs([(45.0, 3)])) == 1.0


def test_structural_errors(free_policy):
    with pytest.raises(StructuralError):
        BehaviourSpec([2], [1, 3])
    with pytest.raises(StructuralError):
        BehaviourSpec([1, 2], [2, 3])
    with pytest.raises(StructuralError):
        BehaviourSpec([1], [2, 3], {(2, 3): 0.5})
    with pytest.raises(StructuralError):
        transform(free_policy, BehaviourSpec([1], [2]))
    with pytest.raises(StructuralError):
        transform(free_policy, BehaviourSpec([1], [2, 3], {(1, 2): 1.5}))
    with pytest.raises(StructuralError):
        transform(free_policy, BehaviourSpec([1], [2, 3], {(1, 2): 0.0}))


def test_return_to_j0_rejected(general_model):
    with pytest.raises(StructuralError):
        transform(general_model, BehaviourSpec([1], [2]))


def test_spec_round_trip():
    again = BehaviourSpec.from_dict(SPEC.to_dict())
    assert again.to_dict() == SPEC.to_dict()
    with pytest.raises(ValidationError):
        BehaviourSpec.from_dict({"j0": [1]})
