"""Policyholder options through a change of measure.

Macrostates split into ``J0`` (before exercise, containing 1) and ``J1``
(after exercise).  At the exercise time ``tau``, the first entry into ``J1``,
all later payments are scaled by ``rho(tau, Z(tau-), Z(tau))``.

The scaled expected cash flow equals an ordinary one under the intensity
``M_hat``: jump blocks ``J0 -> J1`` are multiplied by ``rho`` and the removed
mass ``(1 - rho) M_jk 1`` is routed to an extra absorbing macrostate
``nabla`` with a single microstate and no payments.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .cashflow import (
    CashFlowTable,
    PaymentSpec,
    expected_cashflow_general,
    expected_cashflow_reset,
    fast_path_cashflow,
)
from .catalogue import CatalogueFunction, Constant, Product, Sum, from_spec
from .errors import StructuralError, UsageError, ValidationError
from .model import AggregateModel, _pair_key
from .mpp import History
from .prodint import TimeGrid

__all__ = ["BehaviourSpec", "transform", "scaled_cashflow", "exercise_factor", "NABLA_NAME"]

NABLA_NAME = "nabla"
DEFAULT_SAMPLES = np.linspace(0.0, 120.0, 241)


@dataclass
class BehaviourSpec:
    """Exercise partition and payment scaling.

    Attributes:
        j0: Macrostates before exercise (must contain 1).
        j1: Macrostates after exercise.
        rho: ``{(j, k): rho(t, j, k)}`` for ``j`` in ``j0``, ``k`` in ``j1``;
            missing pairs scale by 1.
    """

    j0: tuple
    j1: tuple
    rho: dict = field(default_factory=dict)

    def __post_init__(self):
        self.j0 = tuple(sorted(int(j) for j in self.j0))
        self.j1 = tuple(sorted(int(j) for j in self.j1))
        self.rho = {_pair_key(k): from_spec(v) for k, v in self.rho.items()}
        if 1 not in self.j0:
            raise StructuralError("macrostate 1 must belong to J0")
        if set(self.j0) & set(self.j1):
            raise StructuralError("J0 and J1 must be disjoint")
        for j, k in self.rho:
            if j not in self.j0 or k not in self.j1:
                raise StructuralError(f"rho given for ({j},{k}) which is not a J0 -> J1 pair")

    def rho_function(self, j: int, k: int) -> CatalogueFunction:
        return self.rho.get((j, k), Constant(1.0))

    def rho_value(self, t, j: int, k: int):
        return self.rho_function(j, k)(t)

    def to_dict(self) -> dict:
        return {
            "j0": list(self.j0),
            "j1": list(self.j1),
            "rho": {f"{j},{k}": f.to_dict() for (j, k), f in sorted(self.rho.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BehaviourSpec":
        try:
            return cls(data["j0"], data["j1"], data.get("rho", {}))
        except KeyError as exc:
            raise ValidationError(f"behaviour spec is missing {exc.args[0]!r}") from None


def _one_minus(f: CatalogueFunction) -> CatalogueFunction:
    return Sum([Constant(1.0), Product([Constant(-1.0), f])])


def _check(model: AggregateModel, spec: BehaviourSpec, samples) -> None:
    if set(spec.j0) | set(spec.j1) != set(range(1, model.J + 1)):
        raise StructuralError("J0 and J1 must together cover every macrostate of the model")
    Ms = model.many(np.asarray(samples, dtype=float))
    for j in spec.j1:
        for k in spec.j0:
            blk = Ms[:, model.slice(j), model.slice(k)]
            if np.any(blk != 0):
                raise StructuralError(f"model can return from J1 to J0 via ({j},{k}); the exercise would not be final")
    for (j, k), f in spec.rho.items():
        vals = np.asarray(f(np.asarray(samples, dtype=float)))
        if np.any(vals <= 0) or np.any(vals > 1 + 1e-12):
            raise StructuralError(f"rho({j},{k}) leaves (0, 1] at some sample time")


def transform(model: AggregateModel, spec: BehaviourSpec, sample_times: Optional[Iterable[float]] = None) -> AggregateModel:
    """Intensity ``M_hat`` with the dummy macrostate appended as number ``J + 1``."""
    samples = DEFAULT_SAMPLES if sample_times is None else list(sample_times)
    _check(model, spec, samples)
    data = copy.deepcopy(model.to_dict())
    J = model.J
    nab = J + 1
    data["micro_counts"] = list(model.micro_counts) + [1]
    data["macrostates"] = list(model.names) + [NABLA_NAME]
    blocks = data["blocks"]
    blocks[f"{nab},{nab}"] = [[0]]

    if model.reset is not None:
        beta = data["reset"]["beta"]
        for j in spec.j0:
            nabla = [None] * model.micro_counts[j - 1]
            for k in spec.j1:
                key = f"{j},{k}"
                if key not in beta:
                    continue
                rho = spec.rho_function(j, k)
                old = [from_spec(f) for f in beta[key]]
                beta[key] = [Product([rho, f]).to_dict() for f in old]
                for a, f in enumerate(old):
                    term = Product([_one_minus(rho), f])
                    nabla[a] = term if nabla[a] is None else Sum([nabla[a], term])
            if any(x is not None for x in nabla):
                beta[f"{j},{nab}"] = [(x if x is not None else Constant(0.0)).to_dict() for x in nabla]
        if any(key.endswith(f",{nab}") for key in beta):
            data["reset"]["pi"][str(nab)] = [1.0]
        return AggregateModel.from_dict(data)

    for j in spec.j0:
        dj = model.micro_counts[j - 1]
        nabla = [None] * dj
        for k in spec.j1:
            key = f"{j},{k}"
            if key not in blocks:
                continue
            rho = spec.rho_function(j, k)
            new_rows = []
            for a, row in enumerate(blocks[key]):
                new_row = []
                for e in row:
                    if e == 0:
                        new_row.append(0)
                        continue
                    f = from_spec(e)
                    new_row.append(Product([rho, f]).to_dict())
                    term = Product([_one_minus(rho), f])
                    nabla[a] = term if nabla[a] is None else Sum([nabla[a], term])
                new_rows.append(new_row)
            blocks[key] = new_rows
        if any(x is not None for x in nabla):
            blocks[f"{j},{nab}"] = [[(x.to_dict() if x is not None else 0)] for x in nabla]
    return AggregateModel.from_dict(data)


def exercise_factor(spec: BehaviourSpec, history: History) -> float:
    """``rho(tau, Z(tau-), Z(tau))`` if the history contains the exercise, else 1."""
    prev = 1
    for t, y in zip(history.times, history.states):
        if prev in spec.j0 and y in spec.j1:
            return float(spec.rho_value(t, prev, y))
        prev = y
    return 1.0


def scaled_cashflow(
    model: AggregateModel,
    spec: BehaviourSpec,
    conditioning,
    t: float,
    grid: Optional[TimeGrid],
    payments: PaymentSpec,
    exercise: Optional[tuple] = None,
    quadrature: Optional[str] = None,
    until: Optional[float] = None,
) -> CashFlowTable:
    """Expected cash flow of the rho-scaled payments.

    Args:
        conditioning: A ``History`` (any model) or ``(i, u)`` / list of pairs
            (reset models).
        exercise: ``(tau, j, k)`` of a past exercise; required when a pair
            conditioning starts in ``J1``.  Ignored for histories, whose
            exercise is read off the jumps.
        quadrature: Passed through to the underlying cash-flow routine.
    """
    mhat = transform(model, spec)
    if isinstance(conditioning, History):
        factor = exercise_factor(spec, conditioning)
        if payments.duration_independent:
            table = fast_path_cashflow(mhat, conditioning, t, grid, payments, until=until)
        else:
            table = expected_cashflow_general(mhat, conditioning, t, grid, payments, quadrature or "stieltjes", until)
        return table.scaled([factor])

    pairs = [conditioning] if isinstance(conditioning, tuple) and len(conditioning) == 2 and not isinstance(conditioning[0], tuple) else list(conditioning)
    factors = []
    for i, _ in pairs:
        if int(i) in spec.j1:
            if exercise is None:
                raise UsageError(f"conditioning in post-exercise state {i} needs the realized exercise (tau, j, k)")
            tau, j, k = exercise
            factors.append(float(spec.rho_value(tau, int(j), int(k))))
        else:
            factors.append(1.0)
    if payments.duration_independent:
        table = fast_path_cashflow(mhat, pairs, t, grid, payments, until=until)
    else:
        us = {float(u) for _, u in pairs}
        if len(us) != 1:
            raise UsageError("pairs with different durations must be valued separately")
        table = expected_cashflow_reset(mhat, [int(i) for i, _ in pairs], us.pop(), t, grid, payments, quadrature or "trapezoid", until)
    return table.scaled(factors)
