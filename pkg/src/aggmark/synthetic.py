"""Synthetic ground-truth models and contracts used by examples and tests.

The disability model has macrostates active (1), disabled (2) and dead (3),
with ``d2`` hidden disability microstates ordered from acute to chronic.
Recovery and excess mortality fall as the disability becomes chronic, so the
macro-level recovery rate decreases with duration once ``d2 >= 2``.
"""

from __future__ import annotations

import numpy as np

from .cashflow import PaymentSpec
from .catalogue import Constant, GompertzMakeham, Logistic, PiecewiseConstant
from .model import BALANCE, AggregateModel, ResetStructure, build_from_reset

__all__ = [
    "disability_rate",
    "mortality_rate",
    "disability_model",
    "waiting_period_annuity",
    "flat_chain",
    "term_insurance",
    "general_two_state_model",
    "free_policy_model",
    "free_policy_payments",
    "random_generator",
]

LOG10 = np.log(10.0)


def disability_rate(excess: float = 0.0) -> GompertzMakeham:
    """Active to disabled: ``0.0004 + 10**(4.54 + 0.06 t - 10)``."""
    return GompertzMakeham(0.0004 + excess, 10.0 ** (4.54 - 10.0), 10.0**0.06)


def mortality_rate(excess: float = 0.0) -> GompertzMakeham:
    """Mortality ``0.0005 + 10**(5.88 + 0.038 t - 10)`` plus ``excess``."""
    return GompertzMakeham(0.0005 + excess, 10.0 ** (5.88 - 10.0), 10.0**0.038)


def _disability_micro(d2: int):
    """Progression, recovery and excess mortality per disability microstate."""
    if d2 == 1:
        return 0.0, [0.5], [0.03]
    recovery = list(np.geomspace(2.0, 0.1, d2))
    excess = list(np.linspace(0.05, 0.02, d2))
    return 1.5, recovery, excess


def disability_model(d2: int = 2) -> AggregateModel:
    """Reset disability model with ``d2`` disability microstates."""
    if d2 < 1:
        raise ValueError("d2 must be positive")
    prog, recovery, excess = _disability_micro(d2)
    block22 = []
    for a in range(d2):
        row = [0.0] * d2
        row[a] = BALANCE
        if a + 1 < d2:
            row[a + 1] = prog
        block22.append(row)
    reset = ResetStructure(
        beta={
            (1, 2): [disability_rate()],
            (1, 3): [mortality_rate()],
            (2, 1): [Constant(r) for r in recovery],
            (2, 3): [mortality_rate(e) for e in excess],
        },
        pi={1: [1.0], 2: [1.0] + [0.0] * (d2 - 1), 3: [1.0]},
    )
    return build_from_reset(
        [1, d2, 1],
        {1: [[BALANCE]], 2: block22, 3: [[0.0]]},
        reset,
        [1.0],
        names=["active", "disabled", "dead"],
    )


def waiting_period_annuity(retirement: float = 65.0, waiting: float = 0.25, interest: float = 0.02) -> PaymentSpec:
    """Disability annuity of rate 1 until ``retirement``, paid once the spell exceeds ``waiting``."""
    return PaymentSpec(
        sojourn={2: {"time": PiecewiseConstant([retirement], [1.0, 0.0]), "duration": PiecewiseConstant([waiting], [0.0, 1.0])}},
        horizon=retirement,
        interest=Constant(interest),
    )


def flat_chain(reset: bool = True) -> AggregateModel:
    """Three-state active/disabled/dead Markov chain (all ``d_j = 1``)."""
    rates = {
        (1, 2): disability_rate(),
        (1, 3): mortality_rate(),
        (2, 1): Constant(0.3),
        (2, 3): mortality_rate(0.02),
    }
    names = ["active", "disabled", "dead"]
    if reset:
        rs = ResetStructure(beta={k: [v] for k, v in rates.items()}, pi={1: [1.0], 2: [1.0], 3: [1.0]})
        return build_from_reset([1, 1, 1], {1: [[BALANCE]], 2: [[BALANCE]], 3: [[0.0]]}, rs, [1.0], names=names)
    blocks = {(1, 1): [[BALANCE]], (2, 2): [[BALANCE]], (3, 3): [[0.0]]}
    for k, v in rates.items():
        blocks[k] = [[v]]
    return AggregateModel([1, 1, 1], blocks, [1.0], names=names)


def term_insurance(horizon: float = 65.0, interest: float = 0.02, premium: float = 0.0) -> PaymentSpec:
    """Death benefit 1 from active or disabled, optional premium while active."""
    sojourn = {1: -premium} if premium else {}
    return PaymentSpec(
        sojourn=sojourn,
        transition={(1, 3): 1.0, (2, 3): 1.0},
        horizon=horizon,
        interest=Constant(interest),
        duration_independent=True,
    )


def general_two_state_model() -> AggregateModel:
    """Healthy/sick model without the reset property.

    Each macrostate has a mild and a severe microstate; the severity is kept
    across macro jumps, so the jump blocks are diagonal rather than rank one.
    """
    blocks = {
        (1, 1): [[BALANCE, 0.2], [0.0, BALANCE]],
        (1, 2): [[0.1, 0.0], [0.0, 0.6]],
        (2, 1): [[1.2, 0.0], [0.0, 0.15]],
        (2, 2): [[BALANCE, 0.4], [0.0, BALANCE]],
    }
    return AggregateModel([2, 2], blocks, [1.0, 0.0], names=["healthy", "sick"])


def free_policy_model() -> AggregateModel:
    """Reset model with active (J0) and free-policy, dead (J1).

    Active has two hidden microstates with different propensity to convert
    to a free policy.
    """
    reset = ResetStructure(
        beta={
            (1, 2): [Constant(0.02), Constant(0.12)],
            (1, 3): [mortality_rate(), mortality_rate(0.002)],
            (2, 3): [mortality_rate(0.001)],
        },
        pi={2: [1.0], 3: [1.0]},
    )
    return build_from_reset(
        [2, 1, 1],
        {1: [[BALANCE, 0.1], [0.05, BALANCE]], 2: [[BALANCE]], 3: [[0.0]]},
        reset,
        [0.7, 0.3],
        names=["active", "free_policy", "dead"],
    )


def free_policy_payments(horizon: float = 65.0, interest: float = 0.02) -> PaymentSpec:
    """Premium 0.5 while active, death benefit 10 from active and free policy, endowment-like annuity in free policy."""
    return PaymentSpec(
        sojourn={1: -0.5, 2: {"time": PiecewiseConstant([60.0], [0.0, 1.0])}},
        transition={(1, 3): 10.0, (2, 3): 10.0},
        horizon=horizon,
        interest=Constant(interest),
    )


def time_varying_rho() -> Logistic:
    """Scaling that falls from 0.9 to 0.5 around age 55."""
    return Logistic(0.9, 0.5, 0.4, 55.0)


def random_generator(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    """Random intensity matrix (zero row sums) with off-diagonal entries in ``[0, scale]``."""
    A = rng.uniform(0.0, scale, size=(d, d))
    np.fill_diagonal(A, 0.0)
    np.fill_diagonal(A, -A.sum(axis=1))
    return A
