"""Expected cash flows and prospective reserves.

Payments follow ``dB(s) = b_j(s, U(s)) ds`` while in macrostate ``j`` plus
``b_jk(s, U(s-))`` at each jump ``j -> k``.  The expected cash-flow rate at
``s`` is ``a(t, s) = int p(t, s, dz) R(s, z) 1`` with reward matrix
``R(s, z) = diag(b(s, z)) + M(s) * B(s, z)``.

Three routines share one engine:

* ``expected_cashflow_reset`` conditions on ``(Z(t), U(t)) = (i, u)`` in a
  reset model and evaluates the v-integral of the duration decomposition by
  composite trapezoid on the grid.
* ``expected_cashflow_general`` conditions on an explicit jump history in any
  model and integrates the duration law as a Stieltjes sum over the grid's
  tail values plus the atom at ``z = U(t) + s - t``.
* ``fast_path_cashflow`` handles duration-independent payments with a single
  forward sweep.

Inside the engine, ``G[l'] = gamma P(t, t_l')`` is carried forward through the
block-diagonal stay propagators, so ``G[l'] Pbar(t_l', t_l)`` is available for
every pair ``l' <= l`` without storing the full two-dimensional table.
Payment discontinuities in ``s`` or ``z`` that sit on grid points are handled
by evaluating one-sided limits.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .catalogue import CatalogueFunction, Constant, from_spec
from .errors import DomainError, NumericalBlowupError, UsageError, ValidationError
from .model import AggregateModel, _pair_key
from .mpp import History, conditional_micro
from .occprob import gamma as _gamma
from .prodint import EDGE, TimeGrid, chain_forward, interval_propagators

log = logging.getLogger(__name__)

__all__ = [
    "PaymentFunction",
    "PaymentSpec",
    "CashFlowTable",
    "reward_matrix",
    "reward_vector",
    "expected_cashflow_reset",
    "expected_cashflow_general",
    "fast_path_cashflow",
    "reserve",
    "discount_factors",
    "write_cashflow_csv",
]

Conditioning = Union[History, tuple, Sequence[tuple]]


class PaymentFunction:
    """Sum of separable terms ``f(s) g(z)`` of catalogue functions.

    JSON forms: a number (constant rate), ``{"time": spec, "duration": spec}``
    (either key optional, default 1), or a list of such terms.
    """

    def __init__(self, terms: Iterable[tuple]):
        self.terms = tuple((from_spec(f), from_spec(g)) for f, g in terms)

    @classmethod
    def constant(cls, value: float) -> "PaymentFunction":
        return cls([(Constant(float(value)), Constant(1.0))])

    @classmethod
    def from_spec(cls, spec) -> "PaymentFunction":
        if isinstance(spec, PaymentFunction):
            return spec
        if isinstance(spec, (int, float)) and not isinstance(spec, bool):
            return cls.constant(spec)
        items = spec if isinstance(spec, list) else [spec]
        terms = []
        for item in items:
            if not isinstance(item, dict) or not set(item) <= {"time", "duration"}:
                raise ValueError(f"payment term must be an object with 'time' and/or 'duration', got {item!r}")
            terms.append((item.get("time", 1.0), item.get("duration", 1.0)))
        return cls(terms)

    def __call__(self, s, z):
        s = np.asarray(s, dtype=float)
        z = np.asarray(z, dtype=float)
        out = np.zeros(np.broadcast(s, z).shape)
        for f, g in self.terms:
            out = out + np.asarray(f(s)) * np.asarray(g(z))
        return out

    @property
    def duration_independent(self) -> bool:
        return all(g.is_constant for _, g in self.terms)

    @property
    def time_breakpoints(self) -> tuple:
        return tuple(sorted({b for f, _ in self.terms for b in f.breakpoints}))

    @property
    def duration_breakpoints(self) -> tuple:
        return tuple(sorted({b for _, g in self.terms for b in g.breakpoints}))

    def to_spec(self):
        return [{"time": f.to_dict(), "duration": g.to_dict()} for f, g in self.terms]

    def __add__(self, other: "PaymentFunction") -> "PaymentFunction":
        return PaymentFunction(self.terms + other.terms)


@dataclass
class PaymentSpec:
    """Contract payments.

    Attributes:
        sojourn: ``{j: b_j(s, z)}`` payment rates while in macrostate ``j``.
        transition: ``{(j, k): b_jk(s, z)}`` lump sums on jumps, evaluated at
            the pre-jump duration.
        horizon: Contract end ``eta``; every payment is zero for ``s > eta``.
        interest: Deterministic short rate ``r(s)``.
        duration_independent: Declares that no payment depends on ``z``.
    """

    sojourn: dict = field(default_factory=dict)
    transition: dict = field(default_factory=dict)
    horizon: float = 1.0
    interest: CatalogueFunction = field(default_factory=lambda: Constant(0.0))
    duration_independent: bool = False

    def __post_init__(self):
        self.sojourn = {int(j): PaymentFunction.from_spec(f) for j, f in self.sojourn.items()}
        self.transition = {_pair_key(k): PaymentFunction.from_spec(f) for k, f in self.transition.items()}
        for (j, k) in self.transition:
            if j == k:
                raise ValidationError(f"transition payment given for diagonal pair ({j},{k})")
        self.interest = from_spec(self.interest)
        self.horizon = float(self.horizon)
        if not math.isfinite(self.horizon):
            raise ValidationError("horizon must be finite")
        if self.duration_independent:
            for f in list(self.sojourn.values()) + list(self.transition.values()):
                if not f.duration_independent:
                    raise ValidationError("payments declared duration independent but a payment depends on duration")

    @property
    def actually_duration_independent(self) -> bool:
        return all(f.duration_independent for f in list(self.sojourn.values()) + list(self.transition.values()))

    def check_model(self, model: AggregateModel) -> None:
        for j in self.sojourn:
            if not 1 <= j <= model.J:
                raise ValidationError(f"sojourn payment for unknown macrostate {j}")
        for j, k in self.transition:
            if not (1 <= j <= model.J and 1 <= k <= model.J):
                raise ValidationError(f"transition payment for unknown pair ({j},{k})")

    def sojourn_rate(self, j: int, s, z):
        f = self.sojourn.get(j)
        if f is None:
            return np.zeros(np.broadcast(np.asarray(s), np.asarray(z)).shape)
        return f(s, z) * (np.asarray(s) <= self.horizon)

    def transition_payment(self, j: int, k: int, s, z):
        f = self.transition.get((j, k))
        if f is None:
            return np.zeros(np.broadcast(np.asarray(s), np.asarray(z)).shape)
        return f(s, z) * (np.asarray(s) <= self.horizon)

    @property
    def time_breakpoints(self) -> tuple:
        pts = {self.horizon}
        for f in list(self.sojourn.values()) + list(self.transition.values()):
            pts.update(f.time_breakpoints)
        pts.update(self.interest.breakpoints)
        return tuple(sorted(pts))

    @property
    def duration_breakpoints(self) -> tuple:
        pts = set()
        for f in list(self.sojourn.values()) + list(self.transition.values()):
            pts.update(f.duration_breakpoints)
        return tuple(sorted(pts))

    def plus(self, other: "PaymentSpec") -> "PaymentSpec":
        """Payments of both contracts (horizon and interest taken from ``self``)."""
        soj = dict(self.sojourn)
        for j, f in other.sojourn.items():
            soj[j] = soj[j] + f if j in soj else f
        tr = dict(self.transition)
        for key, f in other.transition.items():
            tr[key] = tr[key] + f if key in tr else f
        return PaymentSpec(soj, tr, self.horizon, self.interest, self.duration_independent and other.duration_independent)

    def to_dict(self) -> dict:
        return {
            "sojourn": {str(j): f.to_spec() for j, f in sorted(self.sojourn.items())},
            "transition": {f"{j},{k}": f.to_spec() for (j, k), f in sorted(self.transition.items())},
            "horizon": self.horizon,
            "interest": self.interest.to_dict(),
            "duration_independent": bool(self.duration_independent),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PaymentSpec":
        if "horizon" not in data:
            raise ValidationError("payments need a 'horizon'")
        return cls(
            sojourn=data.get("sojourn", {}),
            transition=data.get("transition", {}),
            horizon=data["horizon"],
            interest=data.get("interest", 0.0),
            duration_independent=bool(data.get("duration_independent", False)),
        )


# rewards ------------------------------------------------------------------


def reward_matrix(model: AggregateModel, payments: PaymentSpec, t: float, u: float) -> np.ndarray:
    """``R(t, u) = diag(b(t, u)) + M(t) * B(t, u)``, a ``d_bar x d_bar`` matrix."""
    M = model(t)
    R = np.zeros_like(M)
    diag = np.zeros(model.dim)
    for j in range(1, model.J + 1):
        diag[model.slice(j)] = float(payments.sojourn_rate(j, t, u))
    R[np.diag_indices(model.dim)] = diag
    for (j, k) in payments.transition:
        sj, sk = model.slice(j), model.slice(k)
        R[sj, sk] = M[sj, sk] * float(payments.transition_payment(j, k, t, u))
    return R


class _Rewards:
    """Evaluates ``R(s, z) 1`` given ``M(s)``.

    ``s`` and ``z`` broadcast together; ``M`` is either one matrix or one per
    entry of ``s``.
    """

    def __init__(self, model: AggregateModel, payments: PaymentSpec):
        self.model = model
        self.pay = payments
        self.sojourn = [(model.slice(j), j) for j in payments.sojourn]
        self.transition = [(model.slice(j), model.slice(k), j, k) for (j, k) in payments.transition]

    def __call__(self, s: float, z: np.ndarray, M: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        shape = np.broadcast(np.asarray(s), z).shape
        out = np.zeros(shape + (self.model.dim,))
        for sj, j in self.sojourn:
            out[..., sj] += self.pay.sojourn_rate(j, s, z)[..., None]
        for sj, sk, j, k in self.transition:
            flow = M[..., sj, sk].sum(axis=-1)
            out[..., sj] += self.pay.transition_payment(j, k, s, z)[..., None] * flow
        return out


def reward_vector(model: AggregateModel, payments: PaymentSpec, s: float, z) -> np.ndarray:
    """``R(s, z) 1`` for an array of durations ``z`` (trailing axis ``d_bar``)."""
    return _Rewards(model, payments)(s, z, model(s))


# tables -------------------------------------------------------------------


@dataclass
class CashFlowTable:
    """Expected cash flows on a grid for one or more conditioning rows.

    Attributes:
        times: Grid ``t = t_0 < ... < t_N``.
        states: Macrostate of each row at time ``t``.
        durations: Duration ``U(t)`` of each row.
        rate: Right limits ``a(t, t_l+)``, shape ``(rows, N + 1)``.
        rate_left: Left limits ``a(t, t_l-)``.
        accumulated: ``A(t, t_l)``.
        discounted: ``int_t^{t_l} exp(-int_t^s r) A(t, ds)``; the last column is
            the reserve.
        method: Name of the routine that built the table.
    """

    times: np.ndarray
    states: tuple
    durations: tuple
    rate: np.ndarray
    rate_left: np.ndarray
    accumulated: np.ndarray
    discounted: np.ndarray
    method: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def reserve(self) -> np.ndarray:
        return self.discounted[:, -1].copy()

    @property
    def start(self) -> float:
        return float(self.times[0])

    def row_index(self, state: int, duration: Optional[float] = None) -> int:
        for r, (i, u) in enumerate(zip(self.states, self.durations)):
            if i == state and (duration is None or abs(u - duration) < 1e-12):
                return r
        raise KeyError(f"no row for state {state}, duration {duration}")

    def scaled(self, factors) -> "CashFlowTable":
        f = np.asarray(factors, dtype=float).reshape(-1, 1) * np.ones((len(self.states), 1))
        return CashFlowTable(
            self.times, self.states, self.durations, self.rate * f, self.rate_left * f,
            self.accumulated * f, self.discounted * f, self.method, dict(self.metadata),
        )

    def accumulated_at(self, s) -> np.ndarray:
        """``A(t, s)`` at arbitrary ``s`` by linear interpolation (per row)."""
        return np.stack([np.interp(s, self.times, row) for row in self.accumulated])

    def records(self) -> list:
        rows = []
        for r, (i, u) in enumerate(zip(self.states, self.durations)):
            for l, s in enumerate(self.times):
                rows.append((i, u, float(s), float(self.rate[r, l]), float(self.accumulated[r, l]), float(self.discounted[r, l])))
        return rows


def write_cashflow_csv(path, tables: Iterable[CashFlowTable], header_comment: Optional[str] = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["initial_state", "initial_duration", "s", "rate", "accumulated", "discounted"])
        for table in tables:
            for i, u, s, a, A, V in table.records():
                w.writerow([i, format(u, ".17g"), format(s, ".17g"), format(a, ".17g"), format(A, ".17g"), format(V, ".17g")])


def discount_factors(interest: CatalogueFunction, t: float, times) -> np.ndarray:
    """``exp(-int_t^s r)`` at each ``s`` in ``times``."""
    times = np.asarray(times, dtype=float)
    return np.exp(-np.asarray(interest.integral(np.full(times.shape, t), times), dtype=float))


def _accumulate(times, a_plus, a_minus, weights=None):
    h = np.diff(times)
    if weights is None:
        inc = 0.5 * h * (a_plus[..., :-1] + a_minus[..., 1:])
    else:
        inc = 0.5 * h * (weights[:-1] * a_plus[..., :-1] + weights[1:] * a_minus[..., 1:])
    out = np.zeros(a_plus.shape)
    out[..., 1:] = np.cumsum(inc, axis=-1)
    return out


def reserve(table: CashFlowTable, interest, grid: Optional[TimeGrid] = None) -> np.ndarray:
    """Prospective reserve per row by discounted trapezoid on the table's grid.

    ``grid`` is accepted for symmetry with the other routines; the table's
    own times define the quadrature.
    """
    interest = from_spec(interest)
    D = discount_factors(interest, table.start, table.times)
    return _accumulate(table.times, table.rate, table.rate_left, D)[:, -1]


def _finish(times, states, durations, a_plus, a_minus, payments, method, meta) -> CashFlowTable:
    D = discount_factors(payments.interest, float(times[0]), times)
    acc = _accumulate(times, a_plus, a_minus)
    disc = _accumulate(times, a_plus, a_minus, D)
    return CashFlowTable(np.array(times), tuple(states), tuple(durations), a_plus, a_minus, acc, disc, method, meta)


# engine -------------------------------------------------------------------


def _valuation_points(model: AggregateModel, payments: PaymentSpec, t: float, grid: Optional[TimeGrid], until: Optional[float]):
    end = payments.horizon if until is None else min(float(until), payments.horizon)
    if not t < end:
        raise DomainError(f"valuation time t={t} must precede the end {end}")
    if grid is None:
        grid = model.grid(t, end).with_breakpoints(payments.time_breakpoints)
    if not grid.covers(t, end):
        raise DomainError(f"grid [{grid.start}, {grid.end}] does not span the valuation interval [{t}, {end}]")
    return grid.between(t, end), grid.substeps_per_interval


def _forward(model: AggregateModel, pts, substeps):
    props = interval_propagators(model.intensity, pts, substeps)
    return chain_forward(props, pts)


def _stay_propagators(model: AggregateModel, pts, substeps):
    psi = interval_propagators(model.diagonal_part(), pts, substeps, backward=True)
    bad = ~np.all(np.isfinite(psi), axis=(1, 2)) | (np.max(np.abs(psi), axis=(1, 2)) > 1e12)
    if np.any(bad):
        raise NumericalBlowupError(pts[int(np.argmax(bad))], "stay propagator")
    return psi


def _side_values(model, pts):
    eps = EDGE
    return model.many(pts + eps), model.many(pts - eps)


def _engine(model, payments, pts, substeps, gam, u, quadrature):
    """Rates ``a(t, t_l+)`` and ``a(t, t_l-)`` for the rows of ``gam``."""
    N = pts.size - 1
    m, d = gam.shape
    t = float(pts[0])
    H = np.diff(pts)
    P = _forward(model, pts, substeps)
    G = np.einsum("md,lde->lme", gam, P)
    psi = _stay_propagators(model, pts, substeps)
    M_plus, M_minus = _side_values(model, pts)
    rewards = _Rewards(model, payments)
    mask = model.block_mask()

    if quadrature == "trapezoid":
        Q_plus = np.einsum("lmd,lde->lme", G, M_plus * (1.0 - mask))
        Q_minus = np.einsum("lmd,lde->lme", G, M_minus * (1.0 - mask))
        W = np.zeros((2, N + 1, m, d))
    elif quadrature == "stieltjes":
        W = np.zeros((1, N + 1, m, d))
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    stay = gam.copy()

    a_plus = np.zeros((m, N + 1))
    a_minus = np.zeros((m, N + 1))
    for l in range(N + 1):
        if quadrature == "trapezoid":
            W[0, l] = Q_plus[l]
            W[1, l] = Q_minus[l]
        else:
            W[0, l] = G[l]
        z = pts[l] - pts[: l + 1]
        z_stay = u + (pts[l] - t)
        for sigma, Ms, out in ((1.0, M_plus[l], a_plus), (-1.0, M_minus[l], a_minus)):
            s = pts[l] + sigma * EDGE
            r_stay = rewards(s, z_stay + sigma * EDGE, Ms)
            total = stay @ r_stay
            if l > 0:
                r_lo = rewards(s, z - EDGE, Ms)  # limits from below in z
                r_hi = rewards(s, z + EDGE, Ms)  # limits from above in z
                if quadrature == "trapezoid":
                    # node l' as left end of [t_l', t_l'+1] and as right end of [t_l'-1, t_l']
                    total = total + np.einsum("l,lmd,ld->m", 0.5 * H[:l], W[0, :l], r_lo[:l])
                    total = total + np.einsum("l,lmd,ld->m", 0.5 * H[:l], W[1, 1 : l + 1], r_hi[1 : l + 1])
                else:
                    mass = W[0, 1 : l + 1] - W[0, :l]
                    r_cell = 0.5 * (r_hi[1 : l + 1] + r_lo[:l])
                    total = total + np.einsum("lmd,ld->m", mass, r_cell)
            out[:, l] = total
        if l < N:
            k = W.shape[0]
            W[:, : l + 1] = (W[:, : l + 1].reshape(-1, d) @ psi[l]).reshape(k, l + 1, m, d)
            stay = stay @ psi[l]
    return a_plus, a_minus


def _fast(model, payments, pts, substeps, gam, u):
    P = _forward(model, pts, substeps)
    G = np.einsum("md,lde->lme", gam, P)
    M_plus, M_minus = _side_values(model, pts)
    rewards = _Rewards(model, payments)
    z = u + pts - pts[0]
    a_plus = np.einsum("lmd,ld->ml", G, rewards(pts + EDGE, z, M_plus))
    a_minus = np.einsum("lmd,ld->ml", G, rewards(pts - EDGE, z, M_minus))
    return a_plus, a_minus


def _meta(pts, substeps, quadrature):
    return {
        "grid_points": int(pts.size),
        "grid_start": float(pts[0]),
        "grid_end": float(pts[-1]),
        "max_step": float(np.max(np.diff(pts))),
        "substeps": int(substeps),
        "quadrature": quadrature,
    }


def _states_arg(model, i) -> list:
    if i is None:
        return list(range(1, model.J + 1))
    if isinstance(i, (int, np.integer)):
        return [int(i)]
    return [int(x) for x in i]


def expected_cashflow_reset(
    model: AggregateModel,
    i,
    u: float,
    t: float,
    grid: Optional[TimeGrid],
    payments: PaymentSpec,
    quadrature: str = "trapezoid",
    until: Optional[float] = None,
) -> CashFlowTable:
    """Cash flows given ``Z(t) = i, U(t) = u`` in a reset model.

    Args:
        model: Model with the reset property.
        i: Initial macrostate, a list of them, or None for all macrostates
            (one table row each).
        u: Initial duration, ``0 <= u <= t``.
        t: Valuation time.
        grid: Grid covering ``[t, eta]``; None builds a monthly grid.
        payments: Contract.
        quadrature: ``"trapezoid"`` (default) or ``"stieltjes"``.
        until: Optional earlier end than the horizon.
    """
    if model.reset is None:
        raise DomainError("expected_cashflow_reset needs a reset model")
    payments.check_model(model)
    states = _states_arg(model, i)
    pts, S = _valuation_points(model, payments, float(t), grid, until)
    gam = np.stack([_gamma(model, k, u, t, grid) for k in states])
    a_p, a_m = _engine(model, payments, pts, S, gam, float(u), quadrature)
    return _finish(pts, states, [float(u)] * len(states), a_p, a_m, payments, "reset", _meta(pts, S, quadrature))


def expected_cashflow_general(
    model: AggregateModel,
    history: History,
    t: float,
    grid: Optional[TimeGrid],
    payments: PaymentSpec,
    quadrature: str = "stieltjes",
    until: Optional[float] = None,
) -> CashFlowTable:
    """Cash flows given an observed jump history up to ``t`` (any model).

    The single table row is labelled with the current macrostate and duration
    ``t - t_n``.
    """
    payments.check_model(model)
    pts, S = _valuation_points(model, payments, float(t), grid, until)
    w, _ = conditional_micro(model, history, float(t), grid)
    gam = np.zeros((1, model.dim))
    gam[0, model.slice(history.last_state)] = w
    u = float(t) - history.last_time
    a_p, a_m = _engine(model, payments, pts, S, gam, u, quadrature)
    return _finish(pts, [history.last_state], [u], a_p, a_m, payments, "general", _meta(pts, S, quadrature))


def fast_path_cashflow(
    model: AggregateModel,
    conditioning: Conditioning,
    t: float,
    grid: Optional[TimeGrid],
    payments: PaymentSpec,
    until: Optional[float] = None,
) -> CashFlowTable:
    """Cash flows for duration-independent payments by one forward sweep.

    ``conditioning`` is a ``History``, a pair ``(i, u)`` or a list of pairs
    (the latter two need a reset model).
    """
    if not payments.duration_independent:
        raise UsageError("fast_path_cashflow requires payments flagged duration_independent")
    payments.check_model(model)
    pts, S = _valuation_points(model, payments, float(t), grid, until)
    if isinstance(conditioning, History):
        w, _ = conditional_micro(model, conditioning, float(t), grid)
        gam = np.zeros((1, model.dim))
        gam[0, model.slice(conditioning.last_state)] = w
        states = [conditioning.last_state]
        durations = [float(t) - conditioning.last_time]
    else:
        pairs = [conditioning] if isinstance(conditioning, tuple) and len(conditioning) == 2 and not isinstance(conditioning[0], tuple) else list(conditioning)
        gam = np.stack([_gamma(model, int(i), float(u), t, grid) for i, u in pairs])
        states = [int(i) for i, _ in pairs]
        durations = [float(u) for _, u in pairs]
    a_p, a_m = _fast(model, payments, pts, S, gam, 0.0)
    return _finish(pts, states, durations, a_p, a_m, payments, "fast", _meta(pts, S, "none"))
