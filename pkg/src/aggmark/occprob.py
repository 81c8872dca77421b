"""Occupation-probability tails with a duration threshold.

``pbar_j(t, s, z) = P(X(s) = j, U(s) > z | F^Z(t))`` where ``U`` is the time
since the last macrostate jump.  In the reset case the conditioning reduces to
``(Z(t), U(t)) = (i, u)``.

The tail is built from three factors: the conditional microstate law at ``t``,
the full product integral from ``t`` to ``(s - z) v t``, and the stay product
integral of the target macrostate from there to ``s``.  For
``s - z <= t`` the middle factor is the identity and the value does not depend
on ``z``, which makes the plateau on ``[s - t, u + s - t)`` exact.
"""

from __future__ import annotations

import csv
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConditioningError, DomainError
from .model import AggregateModel, MicroIndex
from .mpp import History, alpha
from .prodint import TimeGrid, product_integral

__all__ = [
    "gamma",
    "occupation_tail_vector",
    "occupation_tail",
    "semi_markov_tail_vector",
    "semi_markov_tail",
    "tail_matrix",
    "duration_atom",
    "tail_surface",
    "write_tail_surface",
]

NULL_MASS = 1e-14


def _grid(model, grid, a, b):
    # A valuation grid usually starts at t; the spell before t gets a default grid.
    if grid is not None and grid.covers(a, b):
        return grid
    return model.grid(a, max(b, a + 1e-9))


def _stay(model: AggregateModel, j: int, a: float, b: float, grid) -> np.ndarray:
    if b <= a:
        return np.eye(model.micro_counts[j - 1])
    return product_integral(model.block_function(j, j), a, b, _grid(model, grid, a, b))


def _full(model: AggregateModel, a: float, b: float, grid) -> np.ndarray:
    if b <= a:
        return np.eye(model.dim)
    return product_integral(model.intensity, a, b, _grid(model, grid, a, b))


def _entry_weights(model: AggregateModel, i: int, u: float, t: float) -> np.ndarray:
    return np.asarray(model.entry_distribution(i, t - u), dtype=float)


def gamma(model: AggregateModel, i: int, u: float, t: float, grid: Optional[TimeGrid] = None) -> np.ndarray:
    """Microstate law at ``t`` given ``Z(t) = i, U(t) = u`` (reset models).

    Returned as a length ``d_bar`` row vector supported on macrostate ``i``.
    """
    if model.reset is None:
        raise DomainError("conditioning on (state, duration) requires a reset model")
    if not 0 <= u <= t + 1e-12:
        raise DomainError(f"duration u={u} must lie in [0, t={t}]")
    w = _entry_weights(model, i, u, t) @ _stay(model, i, t - u, t, grid)
    denom = float(w.sum())
    if denom < NULL_MASS:
        raise ConditioningError(f"P(stay in {i} for duration {u} up to t={t}) = {denom:.3g}")
    out = np.zeros(model.dim)
    out[model.slice(i)] = w / denom
    return out


def _tail_core(model, y, w0, t0, t, s, z, grid, full_cache=None) -> np.ndarray:
    """Shared tail formula; ``w0`` is the normalized law at the spell start ``t0``."""
    if not t0 <= t + 1e-12 or not t <= s:
        raise DomainError(f"need spell start <= t <= s, got {t0}, {t}, {s}")
    if z < 0:
        raise DomainError("z must be nonnegative")
    out = np.zeros(model.dim)
    if t0 >= s - z:
        return out
    w = w0 @ _stay(model, y, t0, t, grid)
    denom = float(w.sum())
    if denom < NULL_MASS:
        raise ConditioningError(f"P(no jump in ({t0}, {t}]) = {denom:.3g}; cannot condition on it")
    w = w / denom
    cut = s - z
    if cut <= t:
        out[model.slice(y)] = w @ _stay(model, y, t, s, grid)
        return out
    g = np.zeros(model.dim)
    g[model.slice(y)] = w
    P = full_cache if full_cache is not None else _full(model, t, cut, grid)
    g = g @ P
    for j in range(1, model.J + 1):
        sj = model.slice(j)
        out[sj] = g[sj] @ _stay(model, j, cut, s, grid)
    return out


def occupation_tail_vector(
    model: AggregateModel, history: History, t: float, s: float, z: float, grid: Optional[TimeGrid] = None
) -> np.ndarray:
    """``pbar_j(t, s, z)`` for every microstate ``j`` (length ``d_bar``)."""
    tn = history.last_time
    if t < tn:
        raise DomainError(f"t={t} precedes the last jump time {tn}")
    a = alpha(model, history, grid).normalized
    return _tail_core(model, history.last_state, a, tn, t, s, z, grid)


def occupation_tail(
    model: AggregateModel,
    history: History,
    t: float,
    s: float,
    z: float,
    j: int,
    j_micro: int,
    grid: Optional[TimeGrid] = None,
) -> float:
    """``P(X(s) = (j, j_micro), U(s) > z | history up to t)``."""
    idx = MicroIndex(j, j_micro, model.micro_counts).offset
    return float(occupation_tail_vector(model, history, t, s, z, grid)[idx])


def semi_markov_tail_vector(
    model: AggregateModel, i: int, u: float, t: float, s: float, z: float, grid: Optional[TimeGrid] = None, _full_cache=None
) -> np.ndarray:
    if model.reset is None:
        raise DomainError("semi-Markov tails require a reset model")
    if not 0 <= u <= t + 1e-12:
        raise DomainError(f"duration u={u} must lie in [0, t={t}]")
    w0 = _entry_weights(model, i, u, t)
    return _tail_core(model, i, w0, t - u, t, s, z, grid, _full_cache)


def semi_markov_tail(
    model: AggregateModel,
    i: int,
    u: float,
    t: float,
    s: float,
    z: float,
    j: int,
    j_micro: int,
    grid: Optional[TimeGrid] = None,
) -> float:
    """``P(X(s) = (j, j_micro), U(s) > z | Z(t) = i, U(t) = u)``."""
    idx = MicroIndex(j, j_micro, model.micro_counts).offset
    return float(semi_markov_tail_vector(model, i, u, t, s, z, grid)[idx])


def tail_matrix(
    model: AggregateModel,
    u: float,
    t: float,
    s: float,
    z: float,
    grid: Optional[TimeGrid] = None,
    states: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Rows ``i`` of ``pbar_{i, .}(t, u, s, z)``; shape ``(len(states), d_bar)``."""
    states = list(range(1, model.J + 1)) if states is None else list(states)
    cut = s - z
    P = _full(model, t, cut, grid) if cut > t else None
    return np.stack([semi_markov_tail_vector(model, i, u, t, s, z, grid, P) for i in states])


def duration_atom(model: AggregateModel, i: int, u: float, t: float, s: float, grid: Optional[TimeGrid] = None) -> np.ndarray:
    """Jump ``Delta pbar_{i, .}(t, u, s, u + s - t)`` of the tail in ``z``.

    The duration ``U(s)`` equals ``u + s - t`` exactly when no jump happened
    since the spell start, so the tail drops by the plateau value there.  The
    result is nonpositive and supported on macrostate ``i``.
    """
    if not t <= s:
        raise DomainError(f"need t <= s, got {t}, {s}")
    g = gamma(model, i, u, t, grid)
    si = model.slice(i)
    out = np.zeros(model.dim)
    out[si] = -(g[si] @ _stay(model, i, t, s, grid))
    return out


def tail_surface(
    model: AggregateModel,
    states: Iterable[int],
    durations: Iterable[float],
    t: float,
    end_times: Iterable[float],
    thresholds: Iterable[float],
    grid: Optional[TimeGrid] = None,
) -> list:
    """Records ``(i, u, s, z, j, j_micro, value)`` over a product of inputs."""
    states = list(states)
    labels = [MicroIndex.from_offset(r, model.micro_counts) for r in range(model.dim)]
    rows = []
    for u in durations:
        for s in end_times:
            for z in thresholds:
                mat = tail_matrix(model, u, t, s, z, grid, states)
                for i, row in zip(states, mat):
                    for lab, v in zip(labels, row):
                        rows.append((i, u, s, z, lab.macro, lab.micro, float(v)))
    return rows


def write_tail_surface(path, records: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "u", "s", "z", "j", "j_micro", "value"])
        for i, u, s, z, j, jm, v in records:
            w.writerow([i, format(u, ".17g"), format(s, ".17g"), format(z, ".17g"), j, jm, format(v, ".17g")])
