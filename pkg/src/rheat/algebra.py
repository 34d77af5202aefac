"""Discrete k-increment calculus on a time grid.

Increments are stored lazily as evaluators over grid times.  The twisted
coboundary uses an evolution family ``E`` exposing ``apply_S(tau, v)`` and
``apply_a(tau, v)``::

    (delta g)_{tus}     = g_ts - g_tu - g_us
    (dhat g)_{tus}      = g_ts - g_tu - S_{t-u} g_us
    (dhat y)_{ts}       = y_t - S_{t-s} y_s
    (dhat h)_{tuvs}     = h_tvs - h_tus + h_tuv - S_{t-u} h_uvs

Values may be scalars, numpy arrays or ``GridFunction`` objects; anything that
supports ``+``, ``-`` and scalar ``*`` works.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "TimeGrid",
    "Increment2",
    "Increment3",
    "IdentityFamily",
    "ScalarFamily",
    "SewingDivergenceError",
    "SewReport",
    "value_norm",
    "delta_one",
    "delta_hat_one",
    "delta_two",
    "delta_hat_two",
    "delta_three",
    "delta_hat_three",
    "cochain_product",
    "holder_norm",
    "holder_norm3",
    "fit_holder_exponent",
    "riemann_sum",
    "sew",
    "cochain_identity_residuals",
]


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing times starting at 0.  ``level`` is the dyadic level, if any."""

    points: np.ndarray
    level: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a time grid needs at least two points")
        if pts[0] != 0.0:
            raise ValueError("time grids start at 0")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("time grid must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, T: float, cells: int) -> TimeGrid:
        level = int(round(math.log2(cells))) if cells & (cells - 1) == 0 else None
        return cls(np.linspace(0.0, T, cells + 1), level)

    @classmethod
    def dyadic(cls, T: float, level: int) -> TimeGrid:
        return cls.uniform(T, 2**level)

    @property
    def T(self) -> float:
        return float(self.points[-1])

    @property
    def cells(self) -> int:
        return self.points.size - 1

    def __len__(self):
        return self.points.size

    @property
    def is_uniform(self) -> bool:
        h = np.diff(self.points)
        return bool(np.allclose(h, h[0], rtol=1e-10, atol=0))

    def index_of(self, t: float) -> int:
        """Index of grid time ``t``; raises for off-grid times."""
        i = int(np.searchsorted(self.points, t))
        tol = 1e-9 * max(self.T, 1.0)
        for j in (i - 1, i):
            if 0 <= j < self.points.size and abs(self.points[j] - t) <= tol:
                return j
        raise ValueError(f"time {t!r} is not a grid point")

    def subgrid(self, stride: int) -> TimeGrid:
        if stride < 1 or self.cells % stride:
            raise ValueError(f"stride {stride} does not divide {self.cells} cells")
        lvl = None
        if self.level is not None and stride & (stride - 1) == 0:
            lvl = self.level - int(round(math.log2(stride)))
        return TimeGrid(self.points[::stride], lvl)

    def contains(self, other: TimeGrid) -> bool:
        """True when every point of ``other`` is a point of this grid."""
        try:
            for t in other.points:
                self.index_of(t)
        except ValueError:
            return False
        return True


class IdentityFamily:
    """``S = id``: the twisted calculus reduces to the plain one."""

    def apply_S(self, tau, v):
        if tau < 0:
            raise ValueError(f"negative evolution time {tau}")
        return v

    def apply_a(self, tau, v):
        if tau < 0:
            raise ValueError(f"negative evolution time {tau}")
        return v * 0.0


class ScalarFamily:
    """``S_tau = exp(-lam * tau)`` acting on scalars or arrays (``lam`` may be an array)."""

    def __init__(self, lam):
        self.lam = np.asarray(lam, dtype=float)

    def apply_S(self, tau, v):
        if tau < 0:
            raise ValueError(f"negative evolution time {tau}")
        return np.exp(-self.lam * tau) * v

    def apply_a(self, tau, v):
        if tau < 0:
            raise ValueError(f"negative evolution time {tau}")
        return np.expm1(-self.lam * tau) * v


def value_norm(v) -> float:
    """Norm used for audits: L2 for fields, Euclidean for arrays, abs for scalars."""
    if hasattr(v, "norm"):
        return float(v.norm())
    return float(np.linalg.norm(np.ravel(np.asarray(v))))


class Increment2:
    """Two-parameter increment ``v_ts`` for grid times ``s <= t``.

    With ``cache=True`` evaluations are memoized (write-once per key, guarded by
    a lock); intended for audits on small grids.
    """

    def __init__(self, grid: TimeGrid, fn: Callable[[float, float], Any], cache: bool = False):
        self.grid = grid
        self._fn = fn
        self._cache = {} if cache else None
        self._lock = threading.Lock()

    def __call__(self, t: float, s: float):
        if s > t:
            raise ValueError(f"increments need s <= t, got s={s}, t={t}")
        if self._cache is None:
            return self._fn(t, s)
        key = (t, s)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._fn(t, s)
            with self._lock:
                hit = self._cache.setdefault(key, hit)
        return hit

    def dense(self) -> dict:
        """All pairs ``(t, s)`` with ``s <= t``; O(n^2) evaluations."""
        pts = self.grid.points
        return {(t, s): self(t, s) for i, s in enumerate(pts) for t in pts[i:]}


class Increment3:
    """Three-parameter increment ``v_tus`` for grid times ``s <= u <= t``."""

    def __init__(self, grid: TimeGrid, fn: Callable[[float, float, float], Any]):
        self.grid = grid
        self._fn = fn

    def __call__(self, t: float, u: float, s: float):
        if not s <= u <= t:
            raise ValueError(f"need s <= u <= t, got {(t, u, s)}")
        return self._fn(t, u, s)


def _values_on(grid: TimeGrid, y) -> Callable[[float], Any]:
    if callable(y):
        return y
    if len(y) != len(grid):
        raise ValueError(f"path has {len(y)} values for a grid of {len(grid)} points")
    return lambda t: y[grid.index_of(t)]


def delta_one(y, grid: TimeGrid) -> Increment2:
    """``(delta y)_ts = y_t - y_s`` for a path given as values on ``grid`` (or a callable)."""
    ev = _values_on(grid, y)
    return Increment2(grid, lambda t, s: ev(t) - ev(s))


def delta_hat_one(y, grid: TimeGrid, E) -> Increment2:
    """``(dhat y)_ts = y_t - S_{t-s} y_s``."""
    ev = _values_on(grid, y)
    return Increment2(grid, lambda t, s: ev(t) - E.apply_S(t - s, ev(s)))


def delta_two(M: Increment2) -> Increment3:
    return Increment3(M.grid, lambda t, u, s: M(t, s) - M(t, u) - M(u, s))


def delta_hat_two(M: Increment2, E) -> Increment3:
    """``(dhat M)_tus = M_ts - M_tu - S_{t-u} M_us``."""
    return Increment3(M.grid, lambda t, u, s: M(t, s) - M(t, u) - E.apply_S(t - u, M(u, s)))


def delta_three(h: Increment3) -> Callable:
    return lambda t, u, v, s: h(t, v, s) - h(t, u, s) + h(t, u, v) - h(u, v, s)


def delta_hat_three(h: Increment3, E) -> Callable:
    """Twisted coboundary of a 3-increment, evaluated on ``s <= v <= u <= t``."""
    return lambda t, u, v, s: h(t, v, s) - h(t, u, s) + h(t, u, v) - E.apply_S(t - u, h(u, v, s))


def _apply(op, v):
    return op(v) if callable(op) else op * v


def cochain_product(M: Increment2, L):
    """Product sharing the middle index: ``(ML)_ts = M_ts L_s`` for a path ``L``
    (values on the grid or callable), ``(ML)_tus = M_tu L_us`` for an ``Increment2``.

    ``M`` values may be operators (callables) or scalars/arrays.
    """
    if isinstance(L, Increment2):
        return Increment3(M.grid, lambda t, u, s: _apply(M(t, u), L(u, s)))
    ev = _values_on(M.grid, L)
    return Increment2(M.grid, lambda t, s: _apply(M(t, s), ev(s)))


def _pairs(grid: TimeGrid, min_gap: float):
    pts = grid.points
    for i in range(pts.size):
        for j in range(i + 1, pts.size):
            if pts[j] - pts[i] >= min_gap - 1e-15:
                yield pts[j], pts[i]


def holder_norm(v: Increment2, kappa: float, norm: Callable = value_norm, min_gap: float = 0.0) -> float:
    """``max_{s<t} ||v_ts|| / (t-s)^kappa`` over grid pairs with ``t - s >= min_gap``."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    best = None
    for t, s in _pairs(v.grid, min_gap):
        r = norm(v(t, s)) / (t - s) ** kappa
        best = r if best is None else max(best, r)
    if best is None:
        raise ValueError("no admissible grid pairs")
    return float(best)


def holder_norm3(v: Increment3, kappa: float, rho: float, norm: Callable = value_norm) -> float:
    """``max_{s<u<t} ||v_tus|| / ((t-u)^kappa (u-s)^rho)``."""
    pts = v.grid.points
    if pts.size < 3:
        raise ValueError("need at least three grid points")
    best = 0.0
    for s, u, t in combinations(pts, 3):
        best = max(best, norm(v(t, u, s)) / ((t - u) ** kappa * (u - s) ** rho))
    return float(best)


def fit_holder_exponent(gaps: Sequence[float], sizes: Sequence[float]) -> float:
    """Least-squares slope of ``log size`` against ``log gap``.

    Zero sizes are dropped; if everything vanishes the exponent is reported as
    ``inf`` (the increment is identically zero at this resolution).
    """
    g = np.asarray(gaps, dtype=float)
    v = np.asarray(sizes, dtype=float)
    keep = v > 0
    if keep.sum() < 2:
        return math.inf
    slope, _ = np.polyfit(np.log(g[keep]), np.log(v[keep]), 1)
    return float(slope)


def riemann_sum(g: Callable[[float, float], Any], partition: Sequence[float], E):
    """Compensated Riemann sum ``sum_k S_{t, t_{k+1}} g_{t_{k+1} t_k}`` over ``partition``.

    Evaluated in Horner form: ``acc <- S_{t_{k+1}-t_k} acc + g_{t_{k+1} t_k}``.
    """
    pts = list(partition)
    acc = g(pts[1], pts[0])
    for a, b in zip(pts[1:-1], pts[2:]):
        acc = E.apply_S(b - a, acc) + g(b, a)
    return acc


class SewingDivergenceError(RuntimeError):
    pass


@dataclass
class SewReport:
    depths: list[int]
    differences: list[float]
    rate: float
    measured_mu: float = field(init=False)

    def __post_init__(self):
        self.measured_mu = 1.0 + self.rate


def sew(g, s: float, t: float, E, max_depth: int, grid: TimeGrid | None = None, rtol: float = 1e-14):
    """Dyadic compensated Riemann sums of ``g`` on ``[s, t]``.

    Depth ``d`` uses ``2^d`` equal pieces; every subdivision point must be a
    point of ``grid`` (the fine mesh), so depth is capped at the number of
    fine cells in ``[s, t]``.  Returns the depth-``max_depth`` sum and a
    ``SewReport`` with the successive corrections and the fitted rate
    ``-log2`` of their decay (``mu - 1`` when ``dhat g`` is in ``C_3^mu``).
    """
    if s >= t:
        raise ValueError("sew needs s < t")
    grid = grid if grid is not None else getattr(g, "grid", None)
    if grid is not None:
        i0, i1 = grid.index_of(s), grid.index_of(t)
        span = i1 - i0
        if span % (2**max_depth):
            raise ValueError(f"depth {max_depth} would refine below the fine mesh ({span} cells)")
        sub = lambda d: grid.points[i0 : i1 + 1 : span // 2**d]
    else:
        sub = lambda d: np.linspace(s, t, 2**d + 1)

    sums = [riemann_sum(g, sub(d), E) for d in range(max_depth + 1)]
    diffs = [value_norm(sums[d] - sums[d - 1]) for d in range(1, max_depth + 1)]
    scale = max(value_norm(x) for x in sums) or 1.0
    depths = list(range(1, max_depth + 1))
    live = [(d, x) for d, x in zip(depths, diffs) if x > rtol * scale]
    if len(live) < 2:
        rate = math.inf
    else:
        d_arr = np.array([d for d, _ in live], dtype=float)
        x_arr = np.log2([x for _, x in live])
        rate = float(-np.polyfit(d_arr, x_arr, 1)[0])
    report = SewReport(depths, diffs, rate)
    if rate <= 0:
        raise SewingDivergenceError(
            f"dyadic corrections do not contract (rate {rate:.3g}, measured mu {report.measured_mu:.3g})"
        )
    return sums[-1], report


def cochain_identity_residuals(rng, n_points: int = 8, lam: float = 1.7) -> dict:
    """Max residuals of ``delta delta = 0``, ``dhat dhat = 0`` and the Leibniz rule on random scalar data."""
    pts = np.concatenate([[0.0], np.sort(rng.uniform(0.0, 1.0, n_points - 1))])
    grid = TimeGrid(pts)
    E = ScalarFamily(lam)
    y = rng.standard_normal(n_points)
    Mv = rng.standard_normal((n_points, n_points))
    M = Increment2(grid, lambda t, s: 0.0 if t == s else Mv[grid.index_of(t), grid.index_of(s)])
    L = rng.standard_normal(n_points)
    dd = delta_two(delta_one(y, grid))
    hh = delta_hat_two(delta_hat_one(y, grid, E), E)
    h3 = delta_hat_two(M, E)
    hhh = delta_hat_three(h3, E)
    dd3 = delta_three(delta_two(M))
    lhs = delta_hat_two(cochain_product(M, L), E)
    dhatM = delta_hat_two(M, E)
    dL = delta_one(L, grid)
    rhs_b = cochain_product(M, dL)
    r = {"delta_delta": 0.0, "delta_hat_delta_hat": 0.0, "delta_hat_delta_hat_3": 0.0, "delta_delta_3": 0.0,
         "leibniz": 0.0}
    for s, u, t in combinations(pts, 3):
        r["delta_delta"] = max(r["delta_delta"], abs(dd(t, u, s)))
        r["delta_hat_delta_hat"] = max(r["delta_hat_delta_hat"], abs(hh(t, u, s)))
        li = grid.index_of(s)
        res = lhs(t, u, s) - (dhatM(t, u, s) * L[li] - rhs_b(t, u, s))
        r["leibniz"] = max(r["leibniz"], abs(res))
    for s, v, u, t in combinations(pts, 4):
        r["delta_hat_delta_hat_3"] = max(r["delta_hat_delta_hat_3"], abs(hhh(t, u, v, s)))
        r["delta_delta_3"] = max(r["delta_delta_3"], abs(dd3(t, u, v, s)))
    return r
