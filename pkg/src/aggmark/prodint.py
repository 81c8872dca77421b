"""Product integrals of matrix functions via Kolmogorov's equations.

``F(t, s)`` solves the forward equation ``dF/ds = F(t, s) A(s)`` with
``F(t, t) = I`` and equivalently the backward equation
``dF/dt = -A(t) F(t, s)`` with ``F(s, s) = I``.  Both are integrated with the
classical fourth-order Runge-Kutta scheme at a fixed number of substeps per
grid interval.

Because the equations are linear, one RK4 step is multiplication by a step
matrix that depends only on ``A`` at the step's three nodes.  The sweeps below
build those matrices in batch and chain them; the arithmetic is that of RK4,
only the bookkeeping is vectorized.

Intensities are assumed smooth inside each grid interval.  Any discontinuity
must sit on a grid point; interval endpoints are evaluated ``EDGE`` years
inside the interval so one-sided limits are used on each side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NumericalBlowupError

__all__ = [
    "EDGE",
    "BLOWUP_THRESHOLD",
    "DEFAULT_SUBSTEPS",
    "MatrixFunction",
    "TimeGrid",
    "default_grid",
    "node_times",
    "rk4_propagators",
    "interval_propagators",
    "chain_forward",
    "product_integral",
    "forward_sweep",
    "backward_sweep",
]

EDGE = 1e-10
BLOWUP_THRESHOLD = 1e12
DEFAULT_SUBSTEPS = 10
DEFAULT_STEP = 1.0 / 12.0


class MatrixFunction:
    """A square-matrix-valued function of time.

    Args:
        dimension: Matrix size ``d``.
        evaluate: ``t -> (d, d)`` array for a scalar time.
        evaluate_many: Optional vectorized form mapping an array of times of
            any shape to ``shape + (d, d)``.  Falls back to looping.
    """

    def __init__(
        self,
        dimension: int,
        evaluate: Optional[Callable[[float], np.ndarray]] = None,
        evaluate_many: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    ):
        if int(dimension) < 1:
            raise ValueError("dimension must be positive")
        if evaluate is None and evaluate_many is None:
            raise ValueError("need evaluate or evaluate_many")
        self.dimension = int(dimension)
        self._evaluate = evaluate
        self._evaluate_many = evaluate_many

    def __call__(self, t) -> np.ndarray:
        if self._evaluate is not None:
            out = np.asarray(self._evaluate(float(t)), dtype=float)
        else:
            out = np.asarray(self._evaluate_many(np.array([float(t)])), dtype=float)[0]
        d = self.dimension
        if out.shape != (d, d):
            raise ValueError(f"matrix function returned shape {out.shape}, expected {(d, d)}")
        return out

    def many(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        d = self.dimension
        if self._evaluate_many is not None:
            out = np.asarray(self._evaluate_many(times), dtype=float)
        else:
            flat = times.reshape(-1)
            out = np.stack([self(t) for t in flat]) if flat.size else np.zeros((0, d, d))
            out = out.reshape(times.shape + (d, d))
        if out.shape != times.shape + (d, d):
            raise ValueError(f"matrix function returned shape {out.shape}, expected {times.shape + (d, d)}")
        return out

    @classmethod
    def constant(cls, matrix) -> "MatrixFunction":
        m = np.array(matrix, dtype=float)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("constant matrix function needs a square matrix")
        m.setflags(write=False)
        return cls(
            m.shape[0],
            evaluate=lambda t: m,
            evaluate_many=lambda ts: np.broadcast_to(m, np.shape(ts) + m.shape),
        )

    @classmethod
    def scalar(cls, fn: Callable) -> "MatrixFunction":
        """Wrap a vectorized scalar function ``x -> a(x)`` as a 1x1 matrix."""
        return cls(
            1,
            evaluate=lambda t: np.array([[float(fn(t))]]),
            evaluate_many=lambda ts: np.asarray(fn(ts), dtype=float)[..., None, None],
        )

    def masked(self, mask: np.ndarray) -> "MatrixFunction":
        """Same function with entries outside ``mask`` set to zero."""
        mask = np.asarray(mask, dtype=float)
        return MatrixFunction(
            self.dimension,
            evaluate=lambda t: self(t) * mask,
            evaluate_many=lambda ts: self.many(ts) * mask,
        )

    def block(self, rows: slice, cols: slice) -> "MatrixFunction":
        """Square sub-block function (rows and cols must have equal length)."""
        n = len(range(*rows.indices(self.dimension)))
        if n != len(range(*cols.indices(self.dimension))):
            raise ValueError("block must be square")
        return MatrixFunction(
            n,
            evaluate=lambda t: self(t)[rows, cols],
            evaluate_many=lambda ts: self.many(ts)[..., rows, cols],
        )

    def shifted(self, offset: float) -> "MatrixFunction":
        """``x -> A(offset + x)``."""
        return MatrixFunction(
            self.dimension,
            evaluate=lambda t: self(offset + t),
            evaluate_many=lambda ts: self.many(offset + np.asarray(ts, float)),
        )


@dataclass(frozen=True)
class TimeGrid:
    """Ordered evaluation grid with a fixed RK4 refinement per interval."""

    points: np.ndarray
    substeps_per_interval: int = DEFAULT_SUBSTEPS
    _sorted: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1)
        if pts.size < 2:
            raise ValueError("a time grid needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        if int(self.substeps_per_interval) < 1:
            raise ValueError("substeps_per_interval must be a positive integer")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "substeps_per_interval", int(self.substeps_per_interval))
        object.__setattr__(self, "_sorted", pts)

    @classmethod
    def uniform(cls, start: float, end: float, steps: int, substeps: int = DEFAULT_SUBSTEPS) -> "TimeGrid":
        return cls(np.linspace(start, end, int(steps) + 1), substeps)

    @property
    def start(self) -> float:
        return float(self.points[0])

    @property
    def end(self) -> float:
        return float(self.points[-1])

    def covers(self, a: float, b: float) -> bool:
        tol = 1e-12 * max(1.0, abs(self.start), abs(self.end))
        return self.start - tol <= a and b <= self.end + tol

    def index_of(self, t: float) -> int:
        """Index of grid point ``t``; raises if ``t`` is not on the grid."""
        i = int(np.searchsorted(self.points, t))
        for j in (i - 1, i):
            if 0 <= j < self.points.size and abs(self.points[j] - t) <= 1e-12 * max(1.0, abs(t)):
                return j
        raise DomainError(f"t={t!r} is not a grid point")

    def between(self, a: float, b: float) -> np.ndarray:
        """``a``, the grid points strictly inside ``(a, b)``, then ``b``."""
        tol = 1e-12 * max(1.0, abs(a), abs(b))
        inner = self.points[(self.points > a + tol) & (self.points < b - tol)]
        return np.concatenate(([a], inner, [b]))

    def with_breakpoints(self, extra) -> "TimeGrid":
        """Copy with additional exact points inserted (kept inside the span)."""
        extra = np.asarray(list(extra), dtype=float)
        extra = extra[(extra > self.start) & (extra < self.end)]
        pts = np.union1d(self.points, extra)
        tol = 1e-12 * max(1.0, abs(self.start), abs(self.end))
        keep = np.concatenate(([True], np.diff(pts) > tol))
        return TimeGrid(pts[keep], self.substeps_per_interval)

    def restricted(self, a: float, b: float) -> "TimeGrid":
        """Grid on ``[a, b]`` made of ``a``, interior points and ``b``."""
        return TimeGrid(self.between(a, b), self.substeps_per_interval)


def default_grid(a: float, b: float, step: float = DEFAULT_STEP, substeps: int = DEFAULT_SUBSTEPS) -> TimeGrid:
    """Uniform grid on ``[a, b]`` with spacing at most ``step``."""
    if b <= a:
        return TimeGrid(np.array([a, a + 1.0]), substeps)
    n = max(1, int(np.ceil((b - a) / step - 1e-9)))
    return TimeGrid.uniform(a, b, n, substeps)


def _resolve_grid(grid: Optional[TimeGrid], a: float, b: float) -> TimeGrid:
    if grid is None:
        return default_grid(a, b)
    if not grid.covers(a, b):
        raise DomainError(f"interval [{a}, {b}] is not covered by grid span [{grid.start}, {grid.end}]")
    return grid


def node_times(points: np.ndarray, substeps: int) -> np.ndarray:
    """RK4 node times, shape ``(n_intervals, 2 * substeps + 1)``.

    Row ``l`` holds the substep starts, midpoints and ends of interval
    ``[points[l], points[l+1]]``; its first and last entries are pulled
    ``EDGE`` inside the interval.
    """
    points = np.asarray(points, dtype=float)
    a, b = points[:-1], points[1:]
    frac = np.arange(2 * substeps + 1) / (2.0 * substeps)
    nodes = a[:, None] + (b - a)[:, None] * frac
    nudge = np.minimum(EDGE, 0.25 * (b - a) / substeps)
    nodes[:, 0] = a + nudge
    nodes[:, -1] = b - nudge
    return nodes


def rk4_propagators(values: np.ndarray, points: np.ndarray, substeps: int, backward: bool = False) -> np.ndarray:
    """Per-interval RK4 propagators from pre-evaluated matrices.

    Args:
        values: ``A`` at ``node_times(points, substeps)``, shape
            ``(n_intervals, 2 * substeps + 1, d, d)``.
        points: Interval endpoints.
        substeps: Substeps per interval.
        backward: If False return ``Phi_l ~ F(t_l, t_{l+1})`` built by forward
            RK4 steps; if True build the same quantity by stepping the
            backward equation from ``t_{l+1}`` down to ``t_l``.

    Returns:
        Array of shape ``(n_intervals, d, d)``.
    """
    points = np.asarray(points, dtype=float)
    n = points.size - 1
    d = values.shape[-1]
    h = (np.diff(points) / substeps)[:, None, None]
    eye = np.eye(d)
    out = np.broadcast_to(eye, (n, d, d)).copy()
    for m in range(substeps):
        a0 = values[:, 2 * m]
        am = values[:, 2 * m + 1]
        a1 = values[:, 2 * m + 2]
        if not backward:
            k1 = a0
            k2 = (eye + 0.5 * h * k1) @ am
            k3 = (eye + 0.5 * h * k2) @ am
            k4 = (eye + h * k3) @ a1
        else:
            k1 = a1
            k2 = am @ (eye + 0.5 * h * k1)
            k3 = am @ (eye + 0.5 * h * k2)
            k4 = a0 @ (eye + h * k3)
        step = eye + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out = out @ step
    return out


def interval_propagators(A: MatrixFunction, points, substeps: int, backward: bool = False) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    values = A.many(node_times(points, substeps))
    return rk4_propagators(values, points, substeps, backward)


def _check(mat: np.ndarray, time: float) -> None:
    if not np.all(np.isfinite(mat)):
        raise NumericalBlowupError(time, "non-finite entry")
    if mat.size and np.max(np.abs(mat)) > BLOWUP_THRESHOLD:
        raise NumericalBlowupError(time, f"entry magnitude above {BLOWUP_THRESHOLD:g}")


def chain_forward(props: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Cumulative products ``I, P0, P0 P1, ...``; checks for blow-up."""
    n, d, _ = props.shape
    out = np.empty((n + 1, d, d))
    out[0] = np.eye(d)
    for l in range(n):
        out[l + 1] = out[l] @ props[l]
        _check(out[l + 1], points[l + 1])
    return out


def product_integral(A: MatrixFunction, t: float, s: float, grid: Optional[TimeGrid] = None) -> np.ndarray:
    """``F(t, s)``, the product integral of ``A`` over ``[t, s]``.

    Grid points strictly between ``t`` and ``s`` are used as interval ends;
    ``t`` and ``s`` themselves need not lie on the grid.
    """
    t = float(t)
    s = float(s)
    if t > s:
        raise DomainError(f"product integral needs t <= s, got t={t}, s={s}")
    d = A.dimension
    if t == s:
        return np.eye(d)
    grid = _resolve_grid(grid, t, s)
    pts = grid.between(t, s)
    props = interval_propagators(A, pts, grid.substeps_per_interval)
    return chain_forward(props, pts)[-1]


def forward_sweep(A: MatrixFunction, t: float, grid: TimeGrid) -> np.ndarray:
    """``F(t, t_l)`` for every grid point ``t_l >= t``; ``t`` must be on the grid.

    Returns an array of shape ``(m, d, d)`` aligned with
    ``grid.points[grid.index_of(t):]``.
    """
    i = grid.index_of(t)
    pts = grid.points[i:]
    if pts.size == 1:
        return np.eye(A.dimension)[None]
    props = interval_propagators(A, pts, grid.substeps_per_interval)
    return chain_forward(props, pts)


def backward_sweep(A: MatrixFunction, s: float, grid: TimeGrid) -> np.ndarray:
    """``F(t_l, s)`` for every grid point ``t_l <= s``; ``s`` must be on the grid.

    Solves the backward equation from ``s`` down to the grid start.  Returns
    shape ``(m, d, d)`` aligned with ``grid.points[:grid.index_of(s) + 1]``.
    """
    i = grid.index_of(s)
    pts = grid.points[: i + 1]
    d = A.dimension
    out = np.empty((pts.size, d, d))
    out[-1] = np.eye(d)
    if pts.size == 1:
        return out
    props = interval_propagators(A, pts, grid.substeps_per_interval, backward=True)
    for l in range(pts.size - 2, -1, -1):
        out[l] = props[l] @ out[l + 1]
        _check(out[l], pts[l])
    return out
