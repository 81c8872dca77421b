"""Inhomogeneous phase-type (IPH) distributions.

A representation ``(pi, T)`` describes the absorption time of a
time-inhomogeneous Markov jump process with transient phases governed by the
sub-intensity matrix function ``T``.  Survival and density are product
integrals of ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import ConditioningError, DomainError, ValidationError
from .prodint import MatrixFunction, TimeGrid, default_grid, product_integral

__all__ = [
    "IphRepresentation",
    "iph_survival",
    "iph_cdf",
    "iph_density",
    "overshoot_representation",
    "NULL_MASS",
]

NULL_MASS = 1e-14


@dataclass(frozen=True)
class IphRepresentation:
    """Representation ``(pi, T)`` of an IPH law.

    Attributes:
        initial: Row vector of initial phase probabilities.
        subintensity: Sub-intensity matrix function ``T(x)``.
        origin: Absolute time corresponding to ``x = 0``.  Grids passed to the
            functions below are interpreted in absolute time, so an overshoot
            representation reuses the parent's grid unchanged.
    """

    initial: np.ndarray
    subintensity: MatrixFunction
    origin: float = 0.0

    def __post_init__(self):
        pi = np.array(self.initial, dtype=float).reshape(-1)
        pi.setflags(write=False)
        object.__setattr__(self, "initial", pi)
        if pi.size != self.subintensity.dimension:
            raise ValidationError(
                f"initial vector has length {pi.size} but sub-intensity has dimension {self.subintensity.dimension}"
            )
        if np.any(pi < 0) or pi.sum() > 1 + 1e-12:
            raise ValidationError("initial vector must be nonnegative with total mass at most 1")

    @property
    def phases(self) -> int:
        return self.initial.size

    def check(self, sample_times: Iterable[float]) -> None:
        """Raise ``ValidationError`` if ``T`` is not a sub-intensity at any sample time."""
        for x in sample_times:
            T = self.subintensity(x)
            off = T - np.diag(np.diag(T))
            if np.any(np.diag(T) > 1e-12) or np.any(off < -1e-12) or np.any(T.sum(axis=1) > 1e-12):
                raise ValidationError(f"T({x}) is not a sub-intensity matrix")

    def _integral(self, x: float, grid: Optional[TimeGrid]) -> np.ndarray:
        if x < 0:
            raise DomainError(f"x must be nonnegative, got {x}")
        a = self.origin
        if grid is None:
            grid = default_grid(a, a + max(x, 1e-12))
        return product_integral(self.subintensity, a, a + x, grid)


def iph_survival(rep: IphRepresentation, x: float, grid: Optional[TimeGrid] = None) -> float:
    """``P(X > x) = pi F(0, x) 1``."""
    if x == 0:
        return float(rep.initial.sum())
    F = rep._integral(x, grid)
    return float(np.clip(rep.initial @ F @ np.ones(rep.phases), 0.0, 1.0))


def iph_cdf(rep: IphRepresentation, x: float, grid: Optional[TimeGrid] = None) -> float:
    return 1.0 - iph_survival(rep, x, grid)


def iph_density(rep: IphRepresentation, x: float, grid: Optional[TimeGrid] = None) -> float:
    """``f(x) = pi F(0, x) t(x)`` with exit vector ``t(x) = -T(x) 1``."""
    F = np.eye(rep.phases) if x == 0 else rep._integral(x, grid)
    exit_vec = -rep.subintensity(rep.origin + x) @ np.ones(rep.phases)
    return float(max(rep.initial @ F @ exit_vec, 0.0))


def overshoot_representation(rep: IphRepresentation, s: float, grid: Optional[TimeGrid] = None) -> IphRepresentation:
    """Law of ``X - s`` given ``X > s``.

    Returns ``(alpha(s), T(s + .))`` where ``alpha(s)`` is ``pi F(0, s)``
    normalized to a probability vector.
    """
    if s == 0:
        mass = rep.initial
    else:
        mass = rep.initial @ rep._integral(s, grid)
    total = float(mass.sum())
    if total < NULL_MASS:
        raise ConditioningError(f"survival probability at s={s} is {total:.3g}; cannot condition on it")
    alpha = np.clip(mass / total, 0.0, None)
    alpha = alpha / alpha.sum()
    return IphRepresentation(alpha, rep.subintensity, rep.origin + s)
