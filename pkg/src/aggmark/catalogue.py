"""Serializable scalar functions of time (or duration).

Every transition rate, payment factor, interest rate and scaling factor in a
model file is one of the expressions below.  They evaluate elementwise on
numpy arrays, report their discontinuities, and integrate in closed form
where one exists.

Smoothness contract: each function is smooth between its ``breakpoints``.
Callers that integrate an ODE must put those breakpoints on the time grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "CatalogueFunction",
    "Constant",
    "Linear",
    "GompertzMakeham",
    "Logistic",
    "PiecewiseConstant",
    "Sum",
    "Product",
    "from_spec",
    "integrate",
]

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def integrate(
    f: Callable[[np.ndarray], np.ndarray],
    a,
    b,
    breakpoints: Iterable[float] = (),
    nodes: int = 16,
    max_piece: float = 5.0,
) -> np.ndarray:
    """Integrate ``f`` over ``[a, b]`` elementwise for array-valued limits.

    The interval is cut at every breakpoint and on a lattice of spacing
    ``max_piece``; each piece gets ``nodes``-point Gauss-Legendre.  ``f``
    must accept an array of any shape.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    sign = np.where(b >= a, 1.0, -1.0)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    if lo.size == 0:
        return np.zeros(lo.shape)
    cuts = [lo, hi]
    for bp in breakpoints:
        cuts.append(np.clip(bp, lo, hi))
    lo_min, hi_max = float(lo.min()), float(hi.max())
    if hi_max > lo_min and max_piece > 0:
        start = math.floor(lo_min / max_piece) * max_piece
        for x in np.arange(start + max_piece, hi_max, max_piece):
            cuts.append(np.clip(x, lo, hi))
    c = np.sort(np.stack(cuts, axis=-1), axis=-1)
    left, right = c[..., :-1], c[..., 1:]
    half = 0.5 * (right - left)
    mid = 0.5 * (right + left)
    x, w = _gauss_legendre(nodes)
    pts = mid[..., None] + half[..., None] * x
    vals = np.asarray(f(pts), dtype=float)
    total = np.sum(np.sum(vals * w, axis=-1) * half, axis=-1)
    return sign * total


class CatalogueFunction:
    """Base class; subclasses implement ``_eval`` and ``to_dict``."""

    kind: str = ""

    def __call__(self, x):
        arr = np.asarray(x, dtype=float)
        out = np.asarray(self._eval(arr), dtype=float)
        if out.shape != arr.shape:
            out = np.broadcast_to(out, arr.shape).copy()
        return out[()] if out.ndim == 0 else out

    def _eval(self, x: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return ()

    @property
    def is_constant(self) -> bool:
        return False

    def integral(self, a, b):
        """Integral over ``[a, b]``; elementwise for array limits."""
        out = integrate(self._eval, a, b, self.breakpoints)
        return out[()] if np.ndim(out) == 0 else out

    def to_dict(self) -> dict[str, Any]:  # pragma: no cover
        raise NotImplementedError

    def __eq__(self, other):
        return isinstance(other, CatalogueFunction) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(repr(self.to_dict()))

    def __repr__(self):
        return f"{type(self).__name__}({self.to_dict()})"


@dataclass(eq=False, repr=False)
class Constant(CatalogueFunction):
    value: float
    kind = "constant"

    def _eval(self, x):
        return np.full(x.shape, float(self.value))

    @property
    def is_constant(self):
        return True

    def integral(self, a, b):
        return float(self.value) * (np.asarray(b, float) - np.asarray(a, float))

    def to_dict(self):
        return {"type": self.kind, "value": float(self.value)}


@dataclass(eq=False, repr=False)
class Linear(CatalogueFunction):
    """``intercept + slope * x``."""

    intercept: float
    slope: float
    kind = "linear"

    def _eval(self, x):
        return self.intercept + self.slope * x

    def integral(self, a, b):
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        return self.intercept * (b - a) + 0.5 * self.slope * (b * b - a * a)

    def to_dict(self):
        return {"type": self.kind, "intercept": float(self.intercept), "slope": float(self.slope)}


@dataclass(eq=False, repr=False)
class GompertzMakeham(CatalogueFunction):
    """``a + b * c**x``."""

    a: float
    b: float
    c: float
    kind = "gompertz_makeham"

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("Gompertz-Makeham base c must be positive")

    def _eval(self, x):
        return self.a + self.b * np.power(self.c, x)

    def integral(self, a, b):
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        if self.c == 1.0:
            return (self.a + self.b) * (b - a)
        lc = math.log(self.c)
        return self.a * (b - a) + self.b / lc * (np.power(self.c, b) - np.power(self.c, a))

    def to_dict(self):
        return {"type": self.kind, "a": float(self.a), "b": float(self.b), "c": float(self.c)}


@dataclass(eq=False, repr=False)
class Logistic(CatalogueFunction):
    """``lower + (upper - lower) / (1 + exp(-rate * (x - midpoint)))``."""

    lower: float
    upper: float
    rate: float
    midpoint: float
    kind = "logistic"

    def _eval(self, x):
        return self.lower + (self.upper - self.lower) / (1.0 + np.exp(-self.rate * (x - self.midpoint)))

    def integral(self, a, b):
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        if self.rate == 0.0:
            return 0.5 * (self.lower + self.upper) * (b - a)
        k = self.rate
        soft = np.logaddexp(0.0, k * (b - self.midpoint)) - np.logaddexp(0.0, k * (a - self.midpoint))
        return self.lower * (b - a) + (self.upper - self.lower) * soft / k

    def to_dict(self):
        return {
            "type": self.kind,
            "lower": float(self.lower),
            "upper": float(self.upper),
            "rate": float(self.rate),
            "midpoint": float(self.midpoint),
        }


@dataclass(eq=False, repr=False)
class PiecewiseConstant(CatalogueFunction):
    """Right-continuous step function.

    ``values[0]`` applies below ``breaks[0]``, ``values[i]`` on
    ``[breaks[i-1], breaks[i])`` and ``values[-1]`` from ``breaks[-1]`` on.
    """

    breaks: Sequence[float]
    values: Sequence[float]
    kind = "piecewise_constant"

    def __post_init__(self):
        self.breaks = tuple(float(b) for b in self.breaks)
        self.values = tuple(float(v) for v in self.values)
        if len(self.values) != len(self.breaks) + 1:
            raise ValueError("piecewise_constant needs len(values) == len(breaks) + 1")
        if any(b2 <= b1 for b1, b2 in zip(self.breaks, self.breaks[1:])):
            raise ValueError("piecewise_constant breaks must be strictly increasing")

    def _eval(self, x):
        idx = np.searchsorted(np.asarray(self.breaks), x, side="right")
        return np.asarray(self.values)[idx]

    @property
    def breakpoints(self):
        return self.breaks

    @property
    def is_constant(self):
        return len(set(self.values)) == 1

    def integral(self, a, b):
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        edges = np.concatenate(([-np.inf], self.breaks, [np.inf]))
        total = np.zeros(np.broadcast(a, b).shape)
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        for v, e0, e1 in zip(self.values, edges[:-1], edges[1:]):
            total = total + v * np.clip(np.minimum(hi, e1) - np.maximum(lo, e0), 0.0, None)
        return np.where(b >= a, total, -total)

    def to_dict(self):
        return {"type": self.kind, "breaks": list(self.breaks), "values": list(self.values)}


@dataclass(eq=False, repr=False)
class Sum(CatalogueFunction):
    terms: Sequence[CatalogueFunction]
    kind = "sum"

    def __post_init__(self):
        self.terms = tuple(self.terms)

    def _eval(self, x):
        out = np.zeros(x.shape)
        for t in self.terms:
            out = out + t._eval(x)
        return out

    @property
    def breakpoints(self):
        return tuple(sorted({b for t in self.terms for b in t.breakpoints}))

    @property
    def is_constant(self):
        return all(t.is_constant for t in self.terms)

    def integral(self, a, b):
        return sum(t.integral(a, b) for t in self.terms)

    def to_dict(self):
        return {"type": self.kind, "terms": [t.to_dict() for t in self.terms]}


@dataclass(eq=False, repr=False)
class Product(CatalogueFunction):
    factors: Sequence[CatalogueFunction]
    kind = "product"

    def __post_init__(self):
        self.factors = tuple(self.factors)

    def _eval(self, x):
        out = np.ones(x.shape)
        for f in self.factors:
            out = out * f._eval(x)
        return out

    @property
    def breakpoints(self):
        return tuple(sorted({b for f in self.factors for b in f.breakpoints}))

    @property
    def is_constant(self):
        return all(f.is_constant for f in self.factors)

    def to_dict(self):
        return {"type": self.kind, "factors": [f.to_dict() for f in self.factors]}


_REGISTRY: dict[str, Callable[[dict], CatalogueFunction]] = {
    "constant": lambda d: Constant(d["value"]),
    "linear": lambda d: Linear(d["intercept"], d["slope"]),
    "gompertz_makeham": lambda d: GompertzMakeham(d["a"], d["b"], d["c"]),
    "logistic": lambda d: Logistic(d["lower"], d["upper"], d["rate"], d["midpoint"]),
    "piecewise_constant": lambda d: PiecewiseConstant(d["breaks"], d["values"]),
    "sum": lambda d: Sum([from_spec(t) for t in d["terms"]]),
    "product": lambda d: Product([from_spec(f) for f in d["factors"]]),
}


def from_spec(spec) -> CatalogueFunction:
    """Build a catalogue function from its JSON form.

    A bare number is shorthand for a constant.
    """
    if isinstance(spec, CatalogueFunction):
        return spec
    if isinstance(spec, bool):
        raise ValueError(f"not a function spec: {spec!r}")
    if isinstance(spec, (int, float)):
        return Constant(float(spec))
    if not isinstance(spec, dict) or "type" not in spec:
        raise ValueError(f"not a function spec: {spec!r}")
    kind = spec["type"]
    if kind not in _REGISTRY:
        raise ValueError(f"unknown function type {kind!r}; expected one of {sorted(_REGISTRY)}")
    try:
        return _REGISTRY[kind](spec)
    except KeyError as exc:
        raise ValueError(f"function spec of type {kind!r} is missing field {exc.args[0]!r}") from None
