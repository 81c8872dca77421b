"""Marked point process of macrostate jumps.

Given an observed history ``s_n = (0, 1, t_1, y_1, ..., t_n, y_n)``, the
unnormalized row vector ``alpha(s_n)`` summarizes everything needed about the
hidden microstate: the next sojourn is IPH with initial vector
``alpha / (alpha 1)`` and sub-intensity ``M_{y_n y_n}(t_n + .)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConditioningError, DomainError, ImpossibleHistoryError, NoJumpPossibleError
from .iph import IphRepresentation
from .model import AggregateModel, MicroIndex
from .prodint import TimeGrid, product_integral

__all__ = [
    "History",
    "AlphaVector",
    "alpha",
    "conditional_micro",
    "sojourn_survival",
    "sojourn_representation",
    "mark_distribution",
    "compensator_intensity",
    "small_h_identity_check",
]

RESCALE_BELOW = 1e-250
NULL_MASS = 1e-14


@dataclass(frozen=True)
class History:
    """Observed macrostate jumps after the implicit start ``(0, 1)``.

    Attributes:
        times: Jump times ``t_1 < ... < t_n`` (all positive).
        states: Macrostates ``y_1, ..., y_n`` entered at those times.
    """

    times: tuple = ()
    states: tuple = ()

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        states = tuple(int(y) for y in self.states)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        if len(times) != len(states):
            raise ValueError("times and states must have equal length")
        full_t = (0.0,) + times
        full_y = (1,) + states
        for a, b in zip(full_t, full_t[1:]):
            if not b > a:
                raise ValueError("jump times must be strictly increasing and positive")
        for a, b in zip(full_y, full_y[1:]):
            if a == b:
                raise ValueError("consecutive macrostates must differ")
        if any(not math.isfinite(t) for t in times):
            raise ValueError("jump times must be finite")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence]) -> "History":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def last_time(self) -> float:
        return self.times[-1] if self.times else 0.0

    @property
    def last_state(self) -> int:
        return self.states[-1] if self.states else 1

    def truncated(self, keep: int) -> "History":
        """First ``keep`` jumps."""
        return History(self.times[:keep], self.states[:keep])

    def pairs(self) -> list:
        return list(zip(self.times, self.states))


@dataclass(frozen=True)
class AlphaVector:
    """Unnormalized microstate weights at the last jump.

    The true vector is ``values * exp(log_scale)``; ``log_scale`` absorbs the
    rescalings applied to avoid underflow on long histories.
    """

    values: np.ndarray
    log_scale: float = 0.0

    @property
    def mass(self) -> float:
        return float(self.values.sum())

    @property
    def normalized(self) -> np.ndarray:
        return self.values / self.values.sum()

    @property
    def log_mass(self) -> float:
        return math.log(self.mass) + self.log_scale


def _grid(model: AggregateModel, grid: Optional[TimeGrid], a: float, b: float) -> TimeGrid:
    # history before a valuation grid's start is integrated on a default grid
    if grid is not None and grid.covers(min(a, b), max(a, b)):
        return grid
    return model.grid(min(a, b), max(a, b, a + 1e-9))


def _stay(model: AggregateModel, j: int, a: float, b: float, grid: Optional[TimeGrid]) -> np.ndarray:
    if b == a:
        d = model.micro_counts[j - 1]
        return np.eye(d)
    return product_integral(model.block_function(j, j), a, b, _grid(model, grid, a, b))


def alpha(model: AggregateModel, history: History, grid: Optional[TimeGrid] = None) -> AlphaVector:
    """``alpha(s_n) = pi_1(0) prod F_{y y}(t_l, t_{l+1}) M_{y y'}(t_{l+1})``."""
    vec = np.array(model.initial, dtype=float)
    log_scale = 0.0
    t_prev, y_prev = 0.0, 1
    for t, y in zip(history.times, history.states):
        if not 1 <= y <= model.J:
            raise DomainError(f"macrostate {y} out of range")
        vec = vec @ _stay(model, y_prev, t_prev, t, grid)
        vec = vec @ model(t)[model.slice(y_prev), model.slice(y)]
        mass = float(vec.sum())
        if not mass > 0 or not np.isfinite(mass):
            raise ImpossibleHistoryError(f"history has zero likelihood at jump ({t}, {y_prev}->{y})")
        if mass < RESCALE_BELOW:
            vec = vec / mass
            log_scale += math.log(mass)
        t_prev, y_prev = t, y
    vec = np.clip(vec, 0.0, None)
    if not vec.sum() > 0:
        raise ImpossibleHistoryError("initial distribution has zero mass")
    vec.setflags(write=False)
    return AlphaVector(vec, log_scale)


def conditional_micro(
    model: AggregateModel, history: History, t: float, grid: Optional[TimeGrid] = None
) -> tuple[np.ndarray, float]:
    """Microstate law at ``t`` given ``S_n`` and no jump in ``(t_n, t]``.

    Returns the normalized row vector over macrostate ``y_n`` and the
    conditional survival probability ``P(T_{n+1} > t | S_n)``.
    """
    tn = history.last_time
    if t < tn:
        raise DomainError(f"t={t} precedes the last jump time {tn}")
    a = alpha(model, history, grid).normalized
    w = a @ _stay(model, history.last_state, tn, t, grid)
    surv = float(w.sum())
    if surv < NULL_MASS:
        raise ConditioningError(f"P(no jump before t={t}) = {surv:.3g}; cannot condition on it")
    return w / surv, surv


def sojourn_survival(model: AggregateModel, history: History, t: float, grid: Optional[TimeGrid] = None) -> float:
    """``P(T_{n+1} > t | S_n = s_n)``."""
    tn = history.last_time
    if t < tn:
        raise DomainError(f"t={t} precedes the last jump time {tn}")
    a = alpha(model, history, grid).normalized
    return float(np.clip(a @ _stay(model, history.last_state, tn, t, grid) @ np.ones(a.size), 0.0, 1.0))


def sojourn_representation(model: AggregateModel, history: History, grid: Optional[TimeGrid] = None) -> IphRepresentation:
    """IPH law of ``T_{n+1} - t_n`` given ``s_n`` (origin at ``t_n``)."""
    y = history.last_state
    return IphRepresentation(alpha(model, history, grid).normalized, model.block_function(y, y), history.last_time)


def mark_distribution(model: AggregateModel, history: History, t_next: float, grid: Optional[TimeGrid] = None) -> np.ndarray:
    """``P(Y_{n+1} = k | S_n, T_{n+1} = t_next)`` as a length-J array (entry ``k-1``).

    The entry of the current macrostate is zero.
    """
    tn = history.last_time
    if not t_next > tn:
        raise DomainError(f"t_next={t_next} must exceed the last jump time {tn}")
    y = history.last_state
    a = alpha(model, history, grid).normalized
    w = a @ _stay(model, y, tn, t_next, grid)
    M = model(t_next)
    sy = model.slice(y)
    flows = np.zeros(model.J)
    for k in range(1, model.J + 1):
        if k != y:
            flows[k - 1] = w @ M[sy, model.slice(k)].sum(axis=1)
    total = flows.sum()
    if not total > 0:
        raise NoJumpPossibleError(f"exit rate out of macrostate {y} is zero at t={t_next}")
    return flows / total


def compensator_intensity(
    model: AggregateModel, history: History, j: int, k: int, t: float, grid: Optional[TimeGrid] = None
) -> float:
    """Intensity ``lambda_jk(t)`` of macro jumps ``j -> k`` given the history up to ``t-``.

    ``history`` must describe the sojourn containing ``t``, i.e. ``t_n <= t``
    with no jump in ``(t_n, t)``.  A jump exactly at ``t`` belongs to the next
    sojourn and must not be included.
    """
    tn = history.last_time
    if t < tn:
        raise DomainError(f"t={t} precedes the last jump time {tn}")
    if j == k or history.last_state != j:
        return 0.0
    w, _ = conditional_micro(model, history, t, grid)
    M = model(t)
    return float(max(w @ M[model.slice(j), model.slice(k)].sum(axis=1), 0.0))


def small_h_identity_check(
    model: AggregateModel,
    history: History,
    k: int,
    k_micro: int,
    t: float,
    h: float,
    grid: Optional[TimeGrid] = None,
    n_paths: Optional[int] = None,
    seed: int = 0,
) -> tuple[float, float]:
    """Both sides of the small-h first-jump identity.

    The right side is ``alpha(s_n) F(t_n, t) M_{y k}(t) e_{k_micro} h / (alpha 1)``.
    The left side ``P(t < T_{n+1} <= t + h, X(T_{n+1}) = (k, k_micro) | S_n)``
    is a Monte Carlo estimate when ``n_paths`` is given, otherwise the exact
    integral of the first-jump density over ``(t, t + h]``.
    """
    if h <= 0:
        raise DomainError("h must be positive")
    y = history.last_state
    tn = history.last_time
    if t < tn:
        raise DomainError(f"t={t} precedes the last jump time {tn}")
    if k == y:
        raise DomainError("the target macrostate must differ from the current one")
    col = MicroIndex(k, k_micro, model.micro_counts).offset
    a = alpha(model, history, grid).normalized
    sy = model.slice(y)
    w = a @ _stay(model, y, tn, t, grid)
    rhs = float(w @ model(t)[sy, col]) * h
    if n_paths is not None:
        from .sim import FirstJumpWindow, HistoryStart, estimate

        mean, _ = estimate(model, HistoryStart(history), FirstJumpWindow(t, h, col), n_paths, seed, grid=grid)
        return float(mean[0]), rhs
    # exact first-jump mass over the window, 16-point Gauss-Legendre
    x, wts = np.polynomial.legendre.leggauss(16)
    nodes = t + 0.5 * h * (x + 1.0)
    lhs = 0.0
    prev_t, vec = t, w
    for v, wt in zip(nodes, wts):
        vec = vec @ _stay(model, y, prev_t, v, grid)
        prev_t = v
        lhs += 0.5 * h * wt * float(vec @ model(v)[sy, col])
    return lhs, rhs
