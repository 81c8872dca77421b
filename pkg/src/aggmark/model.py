"""Aggregate Markov models.

The microstate process ``X`` lives on ``E = {(j, jt)}`` with ``j`` the
macrostate (1-based) and ``jt`` the microstate inside it (1-based).  Its
intensity ``M(t)`` is stored block-wise: ``M_jj`` are sub-intensities and
``M_jk`` carry the macro transitions.  Only the macrostate is observed.

Models are built from catalogue functions so they serialize to JSON.  A model
with the reset property stores ``beta_jk`` and ``pi_k`` and forms the
off-diagonal blocks as outer products ``beta_jk(t) pi_k(t)``.

Model file schema (JSON)::

    {
      "macrostates": ["active", "disabled", "dead"],
      "micro_counts": [1, 2, 1],
      "initial": [1.0],
      "blocks": {"1,1": [[{"type": "balance"}]], "1,3": [[0.01]], ...},
      "reset": {"beta": {"1,2": [spec]}, "pi": {"2": [1.0, 0.0]}}
    }

``blocks["j,k"]`` is a ``d_j x d_k`` nested list of function specs (a bare
number is a constant, ``0`` an absent entry).  A diagonal entry may be
``{"type": "balance"}``, meaning minus the sum of the other entries of its
row, which makes the row sum to zero.  When ``reset`` is present the
off-diagonal blocks come from it and must not appear in ``blocks``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .catalogue import CatalogueFunction, Constant, from_spec
from .errors import ConditioningError, DomainError, InconsistentModelError, ValidationError
from .prodint import MatrixFunction, TimeGrid, default_grid, product_integral

log = logging.getLogger(__name__)

__all__ = [
    "BALANCE",
    "MicroIndex",
    "ResetStructure",
    "AggregateModel",
    "Violation",
    "ValidationReport",
    "validate",
    "build_from_reset",
    "exit_rate",
    "semi_markov_rate",
    "load_model",
    "save_model",
]

BALANCE = "balance"
ROW_SUM_TOL = 1e-10


def _pair_key(key) -> tuple[int, int]:
    if isinstance(key, str):
        parts = key.replace(" ", "").split(",")
        if len(parts) != 2:
            raise ValueError(f"bad block key {key!r}; expected 'j,k'")
        return int(parts[0]), int(parts[1])
    j, k = key
    return int(j), int(k)


def _is_balance(spec) -> bool:
    return spec == BALANCE or (isinstance(spec, dict) and spec.get("type") == BALANCE)


def _is_zero(spec) -> bool:
    if isinstance(spec, bool):
        return False
    if isinstance(spec, (int, float)):
        return spec == 0
    if isinstance(spec, Constant):
        return spec.value == 0
    return False


@dataclass(frozen=True)
class MicroIndex:
    """Microstate ``(macro, micro)``, both 1-based, within a layout of ``micro_counts``."""

    macro: int
    micro: int
    micro_counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in self.micro_counts)
        object.__setattr__(self, "micro_counts", counts)
        if not 1 <= self.macro <= len(counts):
            raise ValueError(f"macrostate {self.macro} out of range 1..{len(counts)}")
        if not 1 <= self.micro <= counts[self.macro - 1]:
            raise ValueError(f"microstate {self.micro} out of range 1..{counts[self.macro - 1]}")

    @property
    def offset(self) -> int:
        """0-based position in the flat state vector."""
        return sum(self.micro_counts[: self.macro - 1]) + self.micro - 1

    @classmethod
    def from_offset(cls, offset: int, micro_counts) -> "MicroIndex":
        counts = tuple(int(c) for c in micro_counts)
        if not 0 <= offset < sum(counts):
            raise ValueError(f"offset {offset} out of range")
        start = 0
        for j, d in enumerate(counts, start=1):
            if offset < start + d:
                return cls(j, offset - start + 1, counts)
            start += d
        raise AssertionError("unreachable")


@dataclass
class ResetStructure:
    """Rank-one jump blocks ``M_jk(t) = beta_jk(t) pi_k(t)``.

    Attributes:
        beta: ``{(j, k): [d_j functions]}``, the column vector of jump rates.
        pi: ``{k: [d_k functions]}``, the entry distribution into macrostate k.
    """

    beta: dict = field(default_factory=dict)
    pi: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beta = {_pair_key(k): tuple(from_spec(f) for f in v) for k, v in self.beta.items()}
        self.pi = {int(k): tuple(from_spec(f) for f in v) for k, v in self.pi.items()}
        for (j, k) in self.beta:
            if j == k:
                raise ValueError(f"reset beta given for diagonal pair ({j},{k})")

    def beta_vec(self, j: int, k: int, t) -> np.ndarray:
        """``beta_jk`` at ``t`` (any shape); result has a trailing axis of length ``d_j``."""
        t = np.asarray(t, dtype=float)
        return np.stack([np.broadcast_to(f(t), t.shape) for f in self.beta[(j, k)]], axis=-1)

    def pi_vec(self, k: int, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.stack([np.broadcast_to(f(t), t.shape) for f in self.pi[k]], axis=-1)

    def functions(self) -> Iterable[CatalogueFunction]:
        for v in self.beta.values():
            yield from v
        for v in self.pi.values():
            yield from v

    def to_dict(self) -> dict:
        return {
            "beta": {f"{j},{k}": [f.to_dict() for f in v] for (j, k), v in sorted(self.beta.items())},
            "pi": {str(k): [f.to_dict() for f in v] for k, v in sorted(self.pi.items())},
        }


class AggregateModel:
    """Aggregate Markov model with block intensity ``M(t)``.

    Args:
        micro_counts: ``d_1, ..., d_J``.
        entries: ``{(j, k): d_j x d_k nested list}`` of function specs.  With a
            reset structure only diagonal blocks may be given.
        initial: ``pi_1(0)``, length ``d_1``.
        reset: Optional rank-one jump structure.
        names: Optional macrostate names.
    """

    def __init__(
        self,
        micro_counts: Sequence[int],
        entries: Mapping,
        initial: Sequence[float],
        reset: Optional[ResetStructure] = None,
        names: Optional[Sequence[str]] = None,
    ):
        counts = tuple(int(c) for c in micro_counts)
        if not counts or any(c < 1 for c in counts):
            raise ValidationError("micro_counts must be a nonempty list of positive integers")
        self.micro_counts = counts
        self.J = len(counts)
        self.dim = sum(counts)
        self._offsets = np.concatenate(([0], np.cumsum(counts))).astype(int)
        self.names = tuple(names) if names is not None else tuple(str(j) for j in range(1, self.J + 1))
        if len(self.names) != self.J:
            raise ValidationError("number of macrostate names does not match micro_counts")
        init = np.array(initial, dtype=float).reshape(-1)
        if init.size != counts[0]:
            raise ValidationError(f"initial vector has length {init.size}, expected d_1 = {counts[0]}")
        init.setflags(write=False)
        self.initial = init
        self.reset = reset
        if reset is not None:
            self._check_reset_shapes(reset)

        self._blocks: dict[tuple[int, int], list[list]] = {}
        self._entries: dict[tuple[int, int], CatalogueFunction] = {}
        self._balance_rows: list[int] = []
        for key, block in entries.items():
            j, k = _pair_key(key)
            if not (1 <= j <= self.J and 1 <= k <= self.J):
                raise ValidationError(f"block ({j},{k}) out of range")
            if reset is not None and j != k:
                raise ValidationError(f"block ({j},{k}) given explicitly for a reset model")
            rows = block if isinstance(block, (list, tuple)) else [[block]]
            if len(rows) != counts[j - 1] or any(len(r) != counts[k - 1] for r in rows):
                raise ValidationError(f"block ({j},{k}) must be {counts[j - 1]}x{counts[k - 1]}")
            stored = []
            for a, row in enumerate(rows):
                srow = []
                for b, spec in enumerate(row):
                    r = self._offsets[j - 1] + a
                    c = self._offsets[k - 1] + b
                    if _is_balance(spec):
                        if r != c:
                            raise ValidationError(f"'balance' is only allowed on the diagonal (block {j},{k})")
                        self._balance_rows.append(r)
                        srow.append(BALANCE)
                    elif _is_zero(spec):
                        srow.append(0)
                    else:
                        try:
                            fn = from_spec(spec)
                        except ValueError as exc:
                            raise ValidationError(f"block ({j},{k}) entry ({a + 1},{b + 1}): {exc}") from None
                        self._entries[(r, c)] = fn
                        srow.append(fn)
                stored.append(srow)
            self._blocks[(j, k)] = stored

        d = self.dim
        self._const = np.zeros((d, d))
        self._varying = []
        for (r, c), fn in self._entries.items():
            if isinstance(fn, Constant):
                self._const[r, c] = fn.value
            else:
                self._varying.append((r, c, fn))
        self._balance_rows = sorted(set(self._balance_rows))
        self.intensity = MatrixFunction(d, evaluate_many=self._evaluate_many)

    def _check_reset_shapes(self, reset: ResetStructure) -> None:
        for (j, k), vec in reset.beta.items():
            if not (1 <= j <= self.J and 1 <= k <= self.J):
                raise ValidationError(f"reset beta ({j},{k}) out of range")
            if len(vec) != self.micro_counts[j - 1]:
                raise ValidationError(f"reset beta ({j},{k}) must have length d_{j} = {self.micro_counts[j - 1]}")
            if k not in reset.pi:
                raise ValidationError(f"reset beta ({j},{k}) needs an entry distribution pi_{k}")
        for k, vec in reset.pi.items():
            if not 1 <= k <= self.J:
                raise ValidationError(f"reset pi_{k} out of range")
            if len(vec) != self.micro_counts[k - 1]:
                raise ValidationError(f"reset pi_{k} must have length d_{k} = {self.micro_counts[k - 1]}")

    # evaluation -----------------------------------------------------------

    def _evaluate_many(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        d = self.dim
        out = np.empty(ts.shape + (d, d))
        out[...] = self._const
        for r, c, fn in self._varying:
            out[..., r, c] = fn(ts)
        if self.reset is not None:
            for (j, k) in self.reset.beta:
                b = self.reset.beta_vec(j, k, ts)
                p = self.reset.pi_vec(k, ts)
                out[..., self.slice(j), self.slice(k)] = b[..., :, None] * p[..., None, :]
        for r in self._balance_rows:
            out[..., r, r] = 0.0
            out[..., r, r] = -out[..., r, :].sum(axis=-1)
        return out

    def __call__(self, t) -> np.ndarray:
        return self.intensity(t)

    def many(self, ts) -> np.ndarray:
        return self.intensity.many(ts)

    def slice(self, j: int) -> slice:
        """Flat index range of macrostate ``j`` (1-based)."""
        if not 1 <= j <= self.J:
            raise DomainError(f"macrostate {j} out of range 1..{self.J}")
        return slice(int(self._offsets[j - 1]), int(self._offsets[j]))

    @property
    def offsets(self) -> np.ndarray:
        return self._offsets.copy()

    def macro_of(self) -> np.ndarray:
        """Macrostate (1-based) of every flat microstate."""
        return np.repeat(np.arange(1, self.J + 1), self.micro_counts)

    def block_function(self, j: int, k: int) -> MatrixFunction:
        sj, sk = self.slice(j), self.slice(k)
        dj, dk = sj.stop - sj.start, sk.stop - sk.start
        if dj != dk:
            raise ValueError("block_function only supports square blocks")
        return MatrixFunction(dj, evaluate_many=lambda ts: self.many(ts)[..., sj, sk])

    def diagonal_part(self) -> MatrixFunction:
        """Block-diagonal intensity ``diag(M_11, ..., M_JJ)``."""
        mask = self.block_mask()
        return self.intensity.masked(mask)

    def block_mask(self) -> np.ndarray:
        m = np.zeros((self.dim, self.dim))
        for j in range(1, self.J + 1):
            m[self.slice(j), self.slice(j)] = 1.0
        return m

    @property
    def is_reset(self) -> bool:
        return self.reset is not None

    @property
    def breakpoints(self) -> tuple[float, ...]:
        pts = set()
        for fn in self._entries.values():
            pts.update(fn.breakpoints)
        if self.reset is not None:
            for fn in self.reset.functions():
                pts.update(fn.breakpoints)
        return tuple(sorted(pts))

    def grid(self, a: float, b: float, step: float = 1.0 / 12.0, substeps: int = 10) -> TimeGrid:
        """Default grid on ``[a, b]`` with the model's breakpoints inserted."""
        return default_grid(a, b, step, substeps).with_breakpoints(self.breakpoints)

    def entry_distribution(self, k: int, t: float) -> np.ndarray:
        """``pi_k(t)`` for reset models; ``pi_1(0)`` stands in for macrostate 1 at t = 0."""
        if self.reset is None:
            raise DomainError("entry distributions exist only for reset models")
        if k in self.reset.pi:
            return self.reset.pi_vec(k, float(t))
        if k == 1 and abs(t) <= 1e-12:
            return np.array(self.initial)
        raise DomainError(f"macrostate {k} is never entered after time 0, so pi_{k}({t}) is undefined")

    # serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        blocks = {}
        for (j, k), rows in sorted(self._blocks.items()):
            blocks[f"{j},{k}"] = [
                [({"type": BALANCE} if e == BALANCE else (0 if isinstance(e, int) else e.to_dict())) for e in row]
                for row in rows
            ]
        out = {
            "macrostates": list(self.names),
            "micro_counts": list(self.micro_counts),
            "initial": [float(x) for x in self.initial],
            "blocks": blocks,
        }
        if self.reset is not None:
            out["reset"] = self.reset.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "AggregateModel":
        for key in ("micro_counts", "initial", "blocks"):
            if key not in data:
                raise ValidationError(f"model is missing field {key!r}")
        names = data.get("macrostates")
        if isinstance(names, int):
            names = None
        reset = None
        if data.get("reset") is not None:
            r = data["reset"]
            try:
                reset = ResetStructure(beta=r.get("beta", {}), pi=r.get("pi", {}))
            except ValueError as exc:
                raise ValidationError(f"reset: {exc}") from None
        return cls(data["micro_counts"], data["blocks"], data["initial"], reset=reset, names=names)

    def __eq__(self, other):
        return isinstance(other, AggregateModel) and self.to_dict() == other.to_dict()

    def __repr__(self):
        kind = "reset" if self.is_reset else "general"
        return f"AggregateModel({kind}, micro_counts={self.micro_counts})"


def load_model(path) -> AggregateModel:
    with open(path) as fh:
        return AggregateModel.from_dict(json.load(fh))


def save_model(model: AggregateModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n")


def build_from_reset(
    micro_counts: Sequence[int],
    diagonal_blocks: Mapping,
    reset: ResetStructure,
    initial: Sequence[float],
    names: Optional[Sequence[str]] = None,
) -> AggregateModel:
    """Model whose off-diagonal blocks are ``beta_jk pi_k``.

    ``diagonal_blocks`` maps ``j`` to the ``d_j x d_j`` block of ``M_jj``.
    The diagonal is taken as given; ``validate`` then checks that the exit
    rate ``-M_jj 1`` equals ``sum_k beta_jk``.
    """
    if not isinstance(reset, ResetStructure):
        reset = ResetStructure(**reset)
    counts = tuple(int(c) for c in micro_counts)
    for (j, k), vec in reset.beta.items():
        for f in vec:
            if f.is_constant and float(f(0.0)) < 0:
                raise ValidationError(f"negative beta entry in ({j},{k})")
    entries = {}
    for j, block in diagonal_blocks.items():
        j = int(j)
        entries[(j, j)] = block
    for j in range(1, len(counts) + 1):
        entries.setdefault((j, j), [[0] * counts[j - 1] for _ in range(counts[j - 1])])
    return AggregateModel(counts, entries, initial, reset=reset, names=names)


# validation ---------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    time: float
    kind: str
    where: str
    value: float

    def __str__(self):
        return f"t={self.time:g}: {self.kind} at {self.where} (value {self.value:.6g})"


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def summary(self) -> str:
        if self.ok:
            return "model valid"
        lines = [f"{len(self.violations)} violation(s):"]
        lines += [f"  {v}" for v in self.violations[:20]]
        if len(self.violations) > 20:
            lines.append(f"  ... and {len(self.violations) - 20} more")
        return "\n".join(lines)


def _label(model: AggregateModel, r: int) -> str:
    mi = MicroIndex.from_offset(r, model.micro_counts)
    return f"({mi.macro},{mi.micro})"


def validate(model: AggregateModel, sample_times: Iterable[float]) -> ValidationReport:
    """Check the model invariants at each sample time; never raises."""
    out = []
    init = model.initial
    if np.any(init < 0) or abs(init.sum() - 1.0) > 1e-12:
        out.append(Violation(0.0, "initial distribution", "pi_1(0)", float(init.sum())))
    times = np.asarray(list(sample_times), dtype=float)
    if times.size == 0:
        return ValidationReport(out)
    Ms = model.many(times)
    d = model.dim
    off = ~np.eye(d, dtype=bool)
    for t, M in zip(times, Ms):
        if not np.all(np.isfinite(M)):
            out.append(Violation(float(t), "non-finite intensity", "M", float("nan")))
            continue
        bad = np.argwhere((M < -1e-14) & off)
        for r, c in bad:
            out.append(Violation(float(t), "negative off-diagonal", f"{_label(model, r)}->{_label(model, c)}", float(M[r, c])))
        rows = M.sum(axis=1)
        scale = np.maximum(1.0, np.abs(np.diag(M)))
        for r in np.nonzero(np.abs(rows) > ROW_SUM_TOL * scale)[0]:
            out.append(Violation(float(t), "row sum", f"row {_label(model, r)}", float(rows[r])))
        if model.reset is not None:
            out.extend(_reset_violations(model, float(t), M))
    return ValidationReport(out)


def _reset_violations(model: AggregateModel, t: float, M: np.ndarray) -> list:
    out = []
    reset = model.reset
    for k in reset.pi:
        p = reset.pi_vec(k, t)
        if np.any(p < -1e-14) or abs(p.sum() - 1.0) > 1e-12:
            out.append(Violation(t, "entry distribution", f"pi_{k}", float(p.sum())))
    for j in range(1, model.J + 1):
        sj = model.slice(j)
        total_beta = np.zeros(model.micro_counts[j - 1])
        for k in range(1, model.J + 1):
            if k == j:
                continue
            block = M[sj, model.slice(k)]
            if (j, k) in reset.beta:
                b = reset.beta_vec(j, k, t)
                if np.any(b < 0):
                    out.append(Violation(t, "negative beta", f"beta_{j}{k}", float(b.min())))
                total_beta = total_beta + b
                expect = np.outer(b, reset.pi_vec(k, t))
                err = np.max(np.abs(block - expect)) if block.size else 0.0
                if err > 1e-12:
                    out.append(Violation(t, "rank-one reconstruction", f"M_{j}{k}", float(err)))
            elif np.any(block != 0):
                out.append(Violation(t, "rank-one reconstruction", f"M_{j}{k}", float(np.max(np.abs(block)))))
        m = -M[sj, sj].sum(axis=1)
        err = np.max(np.abs(m - total_beta))
        if err > 1e-12 * max(1.0, float(np.max(np.abs(m)))):
            out.append(Violation(t, "exit rate vs sum of beta", f"m_{j}", float(err)))
    return out


def exit_rate(model: AggregateModel, j: int, t: float) -> np.ndarray:
    """``m_j(t) = -M_jj(t) 1``, cross-checked against ``sum_k M_jk(t) 1``."""
    M = model(t)
    sj = model.slice(j)
    m = -M[sj, sj].sum(axis=1)
    other = M[sj, :].sum(axis=1) - M[sj, sj].sum(axis=1)
    if np.max(np.abs(m - other)) > ROW_SUM_TOL * max(1.0, float(np.max(np.abs(m)))):
        raise InconsistentModelError(
            f"exit rate of macrostate {j} at t={t}: -M_jj 1 = {m} but sum of jump blocks = {other}"
        )
    return m


def semi_markov_rate(model: AggregateModel, j: int, k: int, t: float, u: float, grid: Optional[TimeGrid] = None) -> float:
    """Transition rate ``nu_jk(t, u)`` of the macrostate process of a reset model."""
    if model.reset is None:
        raise DomainError("semi-Markov rates require a reset model")
    if j == k:
        raise DomainError("semi_markov_rate needs j != k")
    if not 0 <= u <= t + 1e-12:
        raise DomainError(f"duration u={u} must lie in [0, t={t}]")
    if (j, k) not in model.reset.beta:
        return 0.0
    start = max(t - u, 0.0)
    w = model.entry_distribution(j, start)
    if u > 0:
        if grid is None:
            grid = model.grid(start, t)
        w = w @ product_integral(model.block_function(j, j), start, t, grid)
    denom = float(w.sum())
    if denom < 1e-14:
        raise ConditioningError(f"no mass remains in macrostate {j} after duration {u} at t={t}")
    return float(max(w @ model.reset.beta_vec(j, k, t) / denom, 0.0))
