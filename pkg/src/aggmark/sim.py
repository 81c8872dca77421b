"""Monte Carlo simulation of the microstate chain.

Paths are simulated in vectorized batches by thinning.  The time axis is cut
into pieces of at most ``PIECE`` years (plus the model's breakpoints).  On
each piece every microstate gets an upper bound on its exit rate equal to
``BOUND_FACTOR`` times the largest rate seen at sampled points.  Candidate
jump times are drawn from the bound and accepted with probability
``actual / bound``.  If a candidate ever finds the actual rate above the bound
the simulation stops with ``BoundViolationError`` instead of silently biasing
the result.

Conditioning on ``Z(t) = i, U(t) = u`` is done by rejection: paths start at
``t - u`` in macrostate ``i`` with microstate drawn from ``pi_i(t - u)`` and
are discarded if they leave ``i`` before ``t``.

Randomness is split per chunk of paths with ``numpy.random.SeedSequence``,
so results depend only on the master seed and the chunk size, never on the
number of worker threads (``AGGMARK_THREADS``).
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .catalogue import integrate
from .errors import BoundViolationError, DomainError, InfeasibleConditioningError
from .model import AggregateModel, MicroIndex
from .mpp import History, alpha
from .prodint import EDGE, TimeGrid

log = logging.getLogger(__name__)

__all__ = [
    "SimPath",
    "PathBatch",
    "StateStart",
    "HistoryStart",
    "sample_path",
    "simulate",
    "estimate",
    "SojournSurvival",
    "MarkFrequency",
    "OccupationTail",
    "PaymentStreams",
    "DiscountedPayments",
    "BinnedCashflow",
    "MartingaleResidual",
    "FirstJumpWindow",
    "MicroAtStart",
    "write_paths",
    "thread_count",
]

PIECE = 0.5
BOUND_FACTOR = 1.5
BOUND_SAMPLES = 9
CHUNK = 20000
MIN_ACCEPTANCE = 1e-4


def thread_count() -> int:
    env = os.environ.get("AGGMARK_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer AGGMARK_THREADS=%r", env)
    return max(1, os.cpu_count() or 1)


# bounds -------------------------------------------------------------------


@dataclass
class _Bounds:
    edges: np.ndarray
    rate: np.ndarray  # (pieces, d)
    dead_after: np.ndarray  # (pieces, d): zero bound from this piece on

    @classmethod
    def build(cls, model: AggregateModel, a: float, b: float) -> "_Bounds":
        n = max(1, int(math.ceil((b - a) / PIECE - 1e-9)))
        edges = np.linspace(a, b, n + 1)
        extra = [x for x in model.breakpoints if a < x < b]
        if extra:
            edges = np.union1d(edges, extra)
        lo, hi = edges[:-1], edges[1:]
        frac = np.linspace(0.0, 1.0, BOUND_SAMPLES)
        pts = lo[:, None] + (hi - lo)[:, None] * frac
        pts[:, 0] = lo + EDGE
        pts[:, -1] = hi - EDGE
        M = model.many(pts)
        exit_rates = -np.diagonal(M, axis1=-2, axis2=-1)
        rate = BOUND_FACTOR * np.max(exit_rates, axis=1)
        rate = np.where(rate > 0, rate, 0.0)
        dead = np.flip(np.cumprod(np.flip(rate == 0, axis=0), axis=0), axis=0).astype(bool)
        return cls(edges, rate, dead)


# paths --------------------------------------------------------------------


@dataclass
class PathBatch:
    """Simulated paths from a common start time.

    Events are stored in CSR form: the events of path ``p`` are
    ``offsets[p]:offsets[p+1]`` in time order.
    """

    start_time: float
    horizon: float
    start_micro: np.ndarray
    spell_start: np.ndarray
    offsets: np.ndarray
    ev_time: np.ndarray
    ev_src: np.ndarray
    ev_dst: np.ndarray
    macro_of: np.ndarray

    @property
    def n(self) -> int:
        return self.start_micro.size

    def macro_events(self) -> "PathBatch":
        """Same paths keeping only jumps that change macrostate."""
        keep = self.macro_of[self.ev_src] != self.macro_of[self.ev_dst]
        path_id = np.repeat(np.arange(self.n), np.diff(self.offsets))
        counts = np.bincount(path_id[keep], minlength=self.n)
        offsets = np.concatenate(([0], np.cumsum(counts)))
        return PathBatch(
            self.start_time, self.horizon, self.start_micro, self.spell_start, offsets,
            self.ev_time[keep], self.ev_src[keep], self.ev_dst[keep], self.macro_of,
        )

    def path_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.offsets))

    def count_upto(self, s: float) -> np.ndarray:
        """Number of events at or before ``s`` on each path."""
        c = np.concatenate(([0], np.cumsum(self.ev_time <= s)))
        return c[self.offsets[1:]] - c[self.offsets[:-1]]

    def micro_at(self, s: float) -> np.ndarray:
        cnt = self.count_upto(s)
        out = self.start_micro.copy()
        has = cnt > 0
        out[has] = self.ev_dst[self.offsets[:-1][has] + cnt[has] - 1]
        return out

    def first_event(self) -> tuple[np.ndarray, np.ndarray]:
        """Time (inf if none) and destination (-1) of the first event per path."""
        has = np.diff(self.offsets) > 0
        t = np.full(self.n, np.inf)
        dst = np.full(self.n, -1)
        t[has] = self.ev_time[self.offsets[:-1][has]]
        dst[has] = self.ev_dst[self.offsets[:-1][has]]
        return t, dst

    def path(self, p: int, seed: Optional[int] = None) -> "SimPath":
        sl = slice(self.offsets[p], self.offsets[p + 1])
        times = np.concatenate(([self.start_time], self.ev_time[sl]))
        micro = np.concatenate(([self.start_micro[p]], self.ev_dst[sl]))
        return SimPath(times, micro, self.macro_of, seed)

    def select(self, idx: np.ndarray) -> "PathBatch":
        idx = np.asarray(idx)
        lens = np.diff(self.offsets)[idx]
        offsets = np.concatenate(([0], np.cumsum(lens)))
        pos = np.concatenate([np.arange(self.offsets[p], self.offsets[p + 1]) for p in idx]) if idx.size else np.zeros(0, int)
        pos = pos.astype(int)
        return PathBatch(
            self.start_time, self.horizon, self.start_micro[idx], self.spell_start[idx], offsets,
            self.ev_time[pos], self.ev_src[pos], self.ev_dst[pos], self.macro_of,
        )


@dataclass
class SimPath:
    """One simulated path: jump times and flat microstates (0-based), start included."""

    times: np.ndarray
    micro: np.ndarray
    macro_of: np.ndarray
    seed: Optional[int] = None

    @property
    def macro(self) -> np.ndarray:
        return self.macro_of[self.micro]

    def micro_indices(self, micro_counts) -> list:
        return [MicroIndex.from_offset(int(x), micro_counts) for x in self.micro]

    def macro_history(self) -> History:
        """Macrostate jumps after the start, collapsing within-macrostate moves."""
        mac = self.macro
        keep = np.nonzero(mac[1:] != mac[:-1])[0] + 1
        return History(tuple(self.times[keep]), tuple(int(x) for x in mac[keep]))


def _sample_categorical(rng, probs: np.ndarray, n: int) -> np.ndarray:
    cum = np.cumsum(probs)
    cum = cum / cum[-1]
    return np.minimum(np.searchsorted(cum, rng.random(n), side="right"), probs.size - 1)


def _simulate(model: AggregateModel, start_time: float, start_micro: np.ndarray, horizon: float, rng, bounds: _Bounds):
    """Core thinning loop; returns event arrays (unsorted by path) and final states."""
    n = start_micro.size
    cur_t = np.full(n, float(start_time))
    cur_x = start_micro.astype(int).copy()
    active = np.arange(n)
    ev_p, ev_t, ev_s, ev_d = [], [], [], []
    edges = bounds.edges
    P = edges.size - 1
    d = model.dim
    while active.size:
        t_a = cur_t[active]
        x_a = cur_x[active]
        piece = np.clip(np.searchsorted(edges, t_a, side="right") - 1, 0, P - 1)
        dead = bounds.dead_after[piece, x_a] | (t_a >= horizon)
        if np.any(dead):
            active = active[~dead]
            continue
        lam = bounds.rate[piece, x_a]
        end = edges[piece + 1]
        with np.errstate(divide="ignore"):
            cand = t_a + rng.exponential(1.0, active.size) / lam
        over = cand >= end
        cur_t[active[over]] = end[over]
        if np.any(~over):
            c_idx = active[~over]
            tau = cand[~over]
            lam_c = lam[~over]
            x = cur_x[c_idx]
            rows = model.many(tau)[np.arange(c_idx.size), x, :]
            q = -rows[np.arange(c_idx.size), x]
            if np.any(q > lam_c * (1 + 1e-9) + 1e-300):
                bad = int(np.argmax(q - lam_c))
                raise BoundViolationError(
                    f"exit rate {q[bad]:.6g} of microstate {x[bad]} at t={tau[bad]:.6g} exceeds thinning bound {lam_c[bad]:.6g}"
                )
            acc = rng.random(c_idx.size) * lam_c < q
            cur_t[c_idx] = tau
            if np.any(acc):
                r = rows[acc].copy()
                src = x[acc]
                r[np.arange(src.size), src] = 0.0
                r = np.clip(r, 0.0, None)
                cum = np.cumsum(r, axis=1)
                target = rng.random(src.size) * cum[:, -1]
                dst = np.minimum((cum <= target[:, None]).sum(axis=1), d - 1)
                pid = c_idx[acc]
                cur_x[pid] = dst
                ev_p.append(pid)
                ev_t.append(tau[acc])
                ev_s.append(src)
                ev_d.append(dst)
        done = cur_t[active] >= horizon
        active = active[~done]
    if ev_p:
        p = np.concatenate(ev_p)
        t = np.concatenate(ev_t)
        s = np.concatenate(ev_s)
        dd = np.concatenate(ev_d)
    else:
        p = np.zeros(0, int)
        t = np.zeros(0)
        s = np.zeros(0, int)
        dd = np.zeros(0, int)
    return p, t, s, dd, cur_x


def _to_batch(model, start_time, horizon, start_micro, spell_start, p, t, s, dd) -> PathBatch:
    order = np.argsort(p, kind="stable")
    counts = np.bincount(p, minlength=start_micro.size)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    return PathBatch(
        float(start_time), float(horizon), start_micro.astype(int), np.asarray(spell_start, float), offsets,
        t[order], s[order].astype(int), dd[order].astype(int), model.macro_of(),
    )


# conditioning -------------------------------------------------------------


@dataclass(frozen=True)
class StateStart:
    """Condition on ``Z(t) = i, U(t) = u``.

    Reset models draw the entry microstate from ``pi_i(t - u)``.  For other
    models only ``i = 1, u = t`` is available (start from ``pi_1(0)``).
    """

    state: int
    duration: float
    time: float

    def start_law(self, model: AggregateModel, grid=None) -> tuple[float, np.ndarray]:
        a = self.time - self.duration
        if a < -1e-12:
            raise DomainError("duration exceeds the conditioning time")
        a = max(a, 0.0)
        if model.reset is not None and (self.state in model.reset.pi or (self.state == 1 and a == 0.0)):
            law = model.entry_distribution(self.state, a)
        elif self.state == 1 and a == 0.0:
            law = np.array(model.initial)
        else:
            raise DomainError(f"cannot start in macrostate {self.state} at time {a} without an entry distribution")
        full = np.zeros(model.dim)
        full[model.slice(self.state)] = law
        return a, full


@dataclass(frozen=True)
class HistoryStart:
    """Condition on an observed history ``S_n = s_n`` (and optionally no jump up to ``until``).

    The microstate at ``t_n`` is drawn from the normalized ``alpha(s_n)``.
    """

    history: History
    until: Optional[float] = None

    @property
    def time(self) -> float:
        return self.until if self.until is not None else self.history.last_time

    def start_law(self, model: AggregateModel, grid=None) -> tuple[float, np.ndarray]:
        a = alpha(model, self.history, grid).normalized
        full = np.zeros(model.dim)
        full[model.slice(self.history.last_state)] = a
        return self.history.last_time, full


def _conditioned_batch(model, cond, horizon, n, rng, grid, bounds_cache) -> tuple[Optional[PathBatch], int]:
    """Simulate ``n`` candidates; return the accepted batch starting at the conditioning time."""
    a, law = cond.start_law(model, grid)
    t = float(cond.time)
    micro = _sample_categorical(rng, law, n)
    spell = np.full(n, a)
    if t > a:
        key = ("pre", a, t)
        if key not in bounds_cache:
            bounds_cache[key] = _Bounds.build(model, a, t)
        p, _, s, dd, final = _simulate(model, a, micro, t, rng, bounds_cache[key])
        macro = model.macro_of()
        left = np.zeros(n, bool)
        left[p[macro[s] != macro[dd]]] = True
        keep = ~left
        micro = final[keep]
        spell = spell[keep]
        if not np.any(keep):
            return None, n
    else:
        keep = np.ones(n, bool)
    key = ("main", t, horizon)
    if key not in bounds_cache:
        bounds_cache[key] = _Bounds.build(model, t, max(horizon, t + 1e-9))
    p, tt, s, dd, _ = _simulate(model, t, micro, horizon, rng, bounds_cache[key])
    return _to_batch(model, t, horizon, micro, spell, p, tt, s, dd), n


def simulate(model: AggregateModel, cond, horizon: float, n_paths: int, seed: int, grid=None) -> tuple[PathBatch, int]:
    """Simulate accepted paths in one go (single stream); returns the batch and candidates used."""
    rng = np.random.default_rng(seed)
    batch, used = _conditioned_batch(model, cond, horizon, n_paths, rng, grid, {})
    return batch, used


def sample_path(model: AggregateModel, horizon: float, seed: int) -> SimPath:
    """One path from time 0 in macrostate 1."""
    batch, _ = simulate(model, StateStart(1, 0.0, 0.0), horizon, 1, seed)
    return batch.path(0, seed)


def write_paths(path, batch: PathBatch) -> None:
    """Debug dump with columns (path_id, time, macro, micro); micro is 1-based within its macrostate."""
    counts = np.bincount(batch.macro_of)[1:]
    offs = np.concatenate(([0], np.cumsum(counts)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "time", "macro", "micro"])
        for p in range(batch.n):
            sp = batch.path(p)
            for t, x in zip(sp.times, sp.micro):
                mac = int(batch.macro_of[x])
                w.writerow([p, format(float(t), ".17g"), mac, int(x - offs[mac - 1] + 1)])


# functionals --------------------------------------------------------------


class Functional:
    """Maps a batch of accepted paths to per-path values of shape ``(n, k)``.

    Rows containing NaN are excluded from the average (used for estimators
    that condition on an event, such as ``MarkFrequency``).
    """

    horizon: float = 0.0

    def values(self, batch: PathBatch, model: AggregateModel) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


@dataclass
class SojournSurvival(Functional):
    """Indicator that the first macro jump after the start is later than each time."""

    times: Sequence[float]

    @property
    def horizon(self):
        return float(np.max(self.times))

    def values(self, batch, model):
        t, _ = batch.macro_events().first_event()
        return (t[:, None] > np.asarray(self.times, float)[None, :]).astype(float)


@dataclass
class MarkFrequency(Functional):
    """Destination macrostate of the first macro jump, given it falls in ``[lo, hi]``."""

    lo: float
    hi: float

    @property
    def horizon(self):
        return float(self.hi)

    def values(self, batch, model):
        t, dst = batch.macro_events().first_event()
        out = np.full((batch.n, model.J), np.nan)
        inside = (t >= self.lo) & (t <= self.hi)
        out[inside] = 0.0
        out[np.nonzero(inside)[0], batch.macro_of[dst[inside]] - 1] = 1.0
        return out


@dataclass
class OccupationTail(Functional):
    """Indicator of ``X(s) = j`` and ``U(s) > z`` for every microstate ``j`` and end time ``s``.

    Values are laid out as ``(len(end_times), d_bar)`` flattened.
    """

    end_times: Sequence[float]
    z: float

    @property
    def horizon(self):
        return float(np.max(self.end_times))

    def values(self, batch, model):
        mb = batch.macro_events()
        cols = []
        for s in self.end_times:
            x = batch.micro_at(s)
            cnt = mb.count_upto(s)
            last = batch.spell_start.copy()
            has = cnt > 0
            last[has] = mb.ev_time[mb.offsets[:-1][has] + cnt[has] - 1]
            ok = (s - last) > self.z
            onehot = np.zeros((batch.n, model.dim))
            onehot[np.arange(batch.n), x] = 1.0
            cols.append(onehot * ok[:, None])
        return np.concatenate(cols, axis=1)


@dataclass
class MicroAtStart(Functional):
    """One-hot microstate at the conditioning time (law of the accepted start)."""

    horizon: float = 0.0

    def values(self, batch, model):
        out = np.zeros((batch.n, model.dim))
        out[np.arange(batch.n), batch.start_micro] = 1.0
        return out


@dataclass
class PaymentStreams(Functional):
    """Payments in bins ``[edges[k], edges[k+1]]`` per path.

    Args:
        payments: A ``PaymentSpec``.
        edges: Bin edges, starting at the conditioning time.
        discounted: Multiply by ``exp(-int_t^s r)`` using the payment interest.
        behaviour: Optional ``BehaviourSpec``; payments from the exercise time
            on are scaled by ``rho(tau, Z(tau-), Z(tau))``.
    """

    payments: object
    edges: Sequence[float]
    discounted: bool = False
    behaviour: object = None

    @property
    def horizon(self):
        return float(min(np.max(self.edges), self.payments.horizon))

    def values(self, batch, model):
        pay = self.payments
        edges = np.asarray(self.edges, float)
        t0 = batch.start_time
        end = min(float(edges[-1]), pay.horizon)
        mb = batch.macro_events()
        n = batch.n
        pid = mb.path_ids()
        # segments: one per path start and one per macro jump
        seg_path = np.concatenate((np.arange(n), pid))
        seg_start = np.concatenate((np.full(n, t0), mb.ev_time))
        seg_macro = np.concatenate((batch.macro_of[batch.start_micro], batch.macro_of[mb.ev_dst]))
        seg_spell = np.concatenate((batch.spell_start, mb.ev_time))
        nxt = np.full(mb.ev_time.size, np.inf)
        if mb.ev_time.size:
            same = pid[1:] == pid[:-1]
            nxt[:-1][same] = mb.ev_time[1:][same]
        first_next = np.full(n, np.inf)
        has = np.diff(mb.offsets) > 0
        first_next[has] = mb.ev_time[mb.offsets[:-1][has]]
        seg_end = np.minimum(np.concatenate((first_next, nxt)), end)

        factor_seg = np.ones(seg_path.size)
        factor_jump = np.ones(mb.ev_time.size)
        if self.behaviour is not None:
            tau, rho = self._exercise(batch, mb)
            factor_seg = np.where(seg_start >= tau[seg_path], rho[seg_path], 1.0)
            factor_jump = np.where(mb.ev_time >= tau[pid], rho[pid], 1.0) if mb.ev_time.size else factor_jump

        interest = pay.interest
        base = float(interest.integral(0.0, t0)) if self.discounted else 0.0

        def disc(s):
            if not self.discounted:
                return 1.0
            return np.exp(-(np.asarray(interest.integral(np.zeros_like(s), s)) - base))

        out = np.zeros((n, edges.size - 1))
        tbps = list(pay.time_breakpoints)
        dbps = pay.duration_breakpoints
        for j, f in pay.sojourn.items():
            sel = np.nonzero(seg_macro == j)[0]
            if sel.size == 0:
                continue
            c = seg_spell[sel]
            bps = tbps + [c + z for z in dbps]
            for b in range(edges.size - 1):
                lo = np.maximum(seg_start[sel], edges[b])
                hi = np.minimum(seg_end[sel], edges[b + 1])
                ok = hi > lo
                if not np.any(ok):
                    continue
                cc = c[ok]

                def integrand(s, cc=cc):
                    cb = cc.reshape(cc.shape + (1,) * (s.ndim - 1))
                    return f(s, s - cb) * (s <= pay.horizon) * disc(s)

                bp = [bp_[ok] if np.ndim(bp_) else bp_ for bp_ in bps]
                val = integrate(integrand, lo[ok], hi[ok], bp) * factor_seg[sel][ok]
                np.add.at(out[:, b], seg_path[sel][ok], val)
        if pay.transition and mb.ev_time.size:
            src = batch.macro_of[mb.ev_src]
            dst = batch.macro_of[mb.ev_dst]
            # spell start of the sojourn that ends at each jump
            prev_spell = np.empty(mb.ev_time.size)
            first = np.zeros(mb.ev_time.size, bool)
            first[mb.offsets[:-1][has]] = True
            prev_spell[first] = batch.spell_start[pid[first]]
            prev_spell[~first] = np.concatenate(([0.0], mb.ev_time[:-1]))[~first]
            for (j, k), f in pay.transition.items():
                sel = np.nonzero((src == j) & (dst == k) & (mb.ev_time > t0) & (mb.ev_time <= end))[0]
                if sel.size == 0:
                    continue
                tau = mb.ev_time[sel]
                amt = f(tau, tau - prev_spell[sel]) * disc(tau) * factor_jump[sel]
                b = np.clip(np.searchsorted(edges, tau, side="left") - 1, 0, edges.size - 2)
                np.add.at(out, (pid[sel], b), amt)
        return out

    def _exercise(self, batch, mb):
        beh = self.behaviour
        n = batch.n
        tau = np.full(n, np.inf)
        rho = np.ones(n)
        if mb.ev_time.size == 0:
            return tau, rho
        pid = mb.path_ids()
        src = batch.macro_of[mb.ev_src]
        dst = batch.macro_of[mb.ev_dst]
        ex = np.isin(src, beh.j0) & np.isin(dst, beh.j1)
        idx = np.nonzero(ex)[0]
        # first exercise per path
        first = idx[np.concatenate(([True], pid[idx][1:] != pid[idx][:-1]))] if idx.size else idx
        for e in first:
            p = pid[e]
            tau[p] = mb.ev_time[e]
            rho[p] = float(beh.rho_value(mb.ev_time[e], int(src[e]), int(dst[e])))
        return tau, rho


def DiscountedPayments(payments, start: float, behaviour=None) -> PaymentStreams:
    """Present value at ``start`` of all payments up to the horizon."""
    return PaymentStreams(payments, [start, payments.horizon], True, behaviour)


def BinnedCashflow(payments, edges, behaviour=None) -> PaymentStreams:
    """Undiscounted payments per time bin."""
    return PaymentStreams(payments, edges, False, behaviour)


@dataclass
class MartingaleResidual(Functional):
    """``N_jk(c) - Lambda_jk(c)`` at each checkpoint, counted from the start time.

    The compensator is integrated along each path by RK4 on the filter
    ``v' = v M_yy`` together with ``Lambda' = v M_yk 1 / (v 1)``; the filter
    restarts after each macro jump from ``v(tau) M_{y y'}(tau)``.
    """

    j: int
    k: int
    checkpoints: Sequence[float]
    start_law: Optional[np.ndarray] = None
    step: float = 0.1

    @property
    def horizon(self):
        return float(np.max(self.checkpoints))

    def values(self, batch, model):
        cps = np.sort(np.asarray(self.checkpoints, float))
        cmax = cps[-1]
        mb = batch.macro_events()
        n = batch.n
        counts = np.diff(mb.offsets)
        pid = mb.path_ids()
        src_m = batch.macro_of[mb.ev_src]
        dst_m = batch.macro_of[mb.ev_dst]
        N = np.zeros((n, cps.size))
        sel = (src_m == self.j) & (dst_m == self.k)
        for ci, c in enumerate(cps):
            np.add.at(N[:, ci], pid[sel & (mb.ev_time <= c)], 1.0)

        Lam = np.zeros((n, cps.size))
        cur_macro = batch.macro_of[batch.start_micro]
        if self.start_law is not None:
            law = np.asarray(self.start_law, float)
        elif batch.start_time == 0.0:
            law = np.zeros(model.dim)
            law[model.slice(1)] = model.initial
        else:
            raise ValueError("MartingaleResidual needs the start law when paths do not start at time 0")
        seg_start = np.full(n, batch.start_time)
        vec_full = np.tile(law, (n, 1))
        q = 0
        alive = np.arange(n)
        reset = model.reset is not None
        while alive.size:
            nxt = np.full(alive.size, np.inf)
            has = counts[alive] > q
            nxt[has] = mb.ev_time[mb.offsets[alive[has]] + q]
            seg_end = np.minimum(nxt, cmax)
            macro_now = cur_macro[alive].copy()
            for y in np.unique(macro_now):
                gi = np.nonzero(macro_now == y)[0]
                grp = alive[gi]
                jumped = nxt[gi] <= cmax
                in_j = int(y) == self.j
                # the filter only matters for the compensator in j or for the next entry law
                if not in_j and (reset or not np.any(jumped)):
                    v = None
                else:
                    sy = model.slice(int(y))
                    v = vec_full[grp][:, sy]
                    v = v / v.sum(axis=1, keepdims=True)
                    a = seg_start[grp]
                    e = seg_end[gi]
                    if in_j:
                        lo = a.copy()
                        for ci, c in enumerate(cps):
                            hi = np.clip(c, a, e)
                            v, dL = self._rk4(model, int(y), sy, v, np.clip(lo, a, e), hi)
                            Lam[grp, ci:] += dL[:, None]
                            lo = hi
                    else:
                        v, _ = self._rk4(model, int(y), sy, v, a, e)
                if np.any(jumped):
                    jp = grp[jumped]
                    tau = nxt[gi][jumped]
                    ydst = dst_m[mb.offsets[jp] + q]
                    new = np.zeros((jp.size, model.dim))
                    if reset:
                        for yd in np.unique(ydst):
                            m = np.nonzero(ydst == yd)[0]
                            sd = model.slice(int(yd))
                            for r in m:
                                new[r, sd] = model.entry_distribution(int(yd), float(tau[r]))
                    else:
                        M = model.many(tau)
                        for yd in np.unique(ydst):
                            m = ydst == yd
                            sd = model.slice(int(yd))
                            new[np.nonzero(m)[0], sd] = np.einsum("pa,pab->pb", v[jumped][m], M[m][:, sy, sd])
                    vec_full[jp] = new
                    cur_macro[jp] = ydst
                    seg_start[jp] = tau
            still = nxt <= cmax
            alive = alive[still]
            q += 1
        return N - Lam

    def _rk4(self, model, y, sy, v, lo, hi):
        length = hi - lo
        if not np.any(length > 0):
            return v, np.zeros(v.shape[0])
        K = int(max(4, min(400, math.ceil(float(np.max(length)) / self.step))))
        h = length / K
        L = np.zeros(v.shape[0])
        sk = model.slice(self.k) if y == self.j else None

        def f(t, w):
            M = model.many(t)
            dw = np.einsum("pa,pab->pb", w, M[:, sy, sy])
            if sk is None:
                return dw, np.zeros(w.shape[0])
            rate = np.einsum("pa,pa->p", w, M[:, sy, sk].sum(axis=2)) / w.sum(axis=1)
            return dw, rate

        t = lo.copy()
        for _ in range(K):
            k1, l1 = f(t, v)
            k2, l2 = f(t + h / 2, v + (h / 2)[:, None] * k1)
            k3, l3 = f(t + h / 2, v + (h / 2)[:, None] * k2)
            k4, l4 = f(t + h, v + h[:, None] * k3)
            v = v + (h / 6)[:, None] * (k1 + 2 * k2 + 2 * k3 + k4)
            L = L + h / 6 * (l1 + 2 * l2 + 2 * l3 + l4)
            v = v / v.sum(axis=1, keepdims=True)
            t = t + h
        return v, L


@dataclass
class FirstJumpWindow(Functional):
    """Indicator that the first macro jump lies in ``(t, t + h]`` and lands in flat microstate ``col``."""

    t: float
    h: float
    col: int

    @property
    def horizon(self):
        return float(self.t + self.h)

    def values(self, batch, model):
        tt, dst = batch.macro_events().first_event()
        return ((tt > self.t) & (tt <= self.t + self.h) & (dst == self.col)).astype(float)[:, None]


# estimation ---------------------------------------------------------------


def _run_chunk(model, cond, functional, n, seed_seq, grid, cache):
    rng = np.random.default_rng(seed_seq)
    horizon = max(functional.horizon, float(cond.time))
    batch, used = _conditioned_batch(model, cond, horizon, n, rng, grid, cache)
    if batch is None or batch.n == 0:
        return np.zeros((0, 0)), used
    return np.asarray(functional.values(batch, model), dtype=float), used


def estimate(
    model: AggregateModel,
    conditioning,
    functional: Functional,
    n_paths: int,
    seed: int,
    grid: Optional[TimeGrid] = None,
    chunk: int = CHUNK,
    threads: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo mean and standard error of a path functional.

    ``n_paths`` accepted paths are used (rejection conditioning may simulate
    more).  Rows with NaN values are dropped from the average.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    workers = threads or thread_count()
    ss = np.random.SeedSequence(int(seed))
    parts = []
    accepted = 0
    simulated = 0
    cache: dict = {}
    rate = 1.0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        while accepted < n_paths:
            need = n_paths - accepted
            n_chunks = max(1, min(workers * 4, math.ceil(need / (max(rate, 1e-3) * chunk))))
            seeds = ss.spawn(n_chunks)
            results = list(pool.map(lambda s: _run_chunk(model, conditioning, functional, chunk, s, grid, cache), seeds))
            for vals, used in results:
                simulated += used
                if vals.size:
                    parts.append(vals)
                    accepted += vals.shape[0]
            rate = accepted / simulated
            if rate < MIN_ACCEPTANCE:
                raise InfeasibleConditioningError(
                    f"rejection conditioning accepted {accepted} of {simulated} paths (rate {rate:.2g} < {MIN_ACCEPTANCE:g})"
                )
    vals = np.concatenate(parts, axis=0)[:n_paths]
    ok = ~np.any(np.isnan(vals), axis=1)
    vals = vals[ok]
    m = vals.shape[0]
    if m == 0:
        return np.full(vals.shape[1], np.nan), np.full(vals.shape[1], np.nan)
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(m) if m > 1 else np.zeros(vals.shape[1])
    return mean, se
