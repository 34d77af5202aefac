"""Mild-form time stepping and Picard iteration for ``dy = Lap y dt + sum_i f_i(y) dx^i``.

One step over ``[s, t]`` is the compensated Riemann summand::

    y_t = S_{t-s} y_s + J_ts(y),
    J_ts = sum_i X^{x,i}(f_i) + sum_i X^{xa,i}(y_s, f_i') + sum_ij X^{xx,ij}(f_j f_i')
           + sum_abc X^{xxx,abc}(f_c f_b' f_a' + f_b f_c f_a'')

with the Gubinelli derivatives read off the solution (``y^x = f(y)``,
``y^{xx,ij} = f_j f_i'``).  The young scheme keeps the first term, rough2 the
first three, rough3 all four; the regularized scheme smooths both payloads by
``S_eps`` and drops ``X^xa``.  Nonlinear payloads are formed on the physical
grid and transformed in one batch.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..algebra import SewingDivergenceError, TimeGrid, fit_holder_exponent, sew
from ..convrp import ConvolutionalRoughPath
from ..semigroup import GridFunction, HeatFamily, apply_heat, save_grid_function
from .fields import Nonlinearity

__all__ = [
    "SCHEMES",
    "SolverConfig",
    "ControlledPath",
    "SolveReport",
    "RemainderReport",
    "PicardReport",
    "BlowUpError",
    "step",
    "step_young",
    "step_rough2",
    "step_regularized",
    "step_rough3",
    "solve",
    "picard_solve",
    "controlled_remainder_audit",
    "taylor_audit",
    "commuting_flow_solution",
    "additive_solution",
]

SCHEMES = ("young_euler", "rough2", "rough2_regularized", "rough3")


@dataclass
class SolverConfig:
    """Time-stepping and diagnostics settings."""

    scheme: str = "rough2"
    steps: int = 64
    kappa: float = 0.35
    alpha: float = 0.25
    p: int = 2
    eps: float = 0.0
    include_xa: bool = True
    picard_cells: int = 16
    picard_max_iter: int = 40
    picard_tol: float = 1e-12
    picard_max_bisections: int = 6
    ceiling_factor: float = 1e6
    seed: int | None = None
    snapshot_stride: int = 0
    audit: bool = True

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.scheme == "rough2_regularized" and not self.eps > 0:
            raise ValueError("the regularized scheme needs eps > 0")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if self.picard_cells < 1 or self.picard_max_iter < 1:
            raise ValueError("Picard settings must be positive")


class BlowUpError(RuntimeError):
    """The trajectory norm left the configured ceiling (local-solution semantics)."""

    def __init__(self, time: float, step: int, norm: float, ceiling: float):
        super().__init__(f"blow-up at t={time:.6g} (step {step}): norm {norm:.3g} exceeds {ceiling:.3g}")
        self.time = time
        self.step = step
        self.norm = norm
        self.ceiling = ceiling


# ---------------------------------------------------------------------------
# one step


def _payloads(f: Nonlinearity, y: GridFunction, order: int):
    if not y.real:
        raise ValueError("nonlinearities act on real-valued fields only")
    xi, v = y.grid.coords, y.values
    F = [f.derivs(xi, v, 0)]
    for m in range(1, order + 1):
        F.append(f.derivs(xi, v, m))
    return F


def _increment(y: GridFunction, s: float, t: float, crp: ConvolutionalRoughPath, f: Nonlinearity,
               scheme: str, include_xa: bool = True, eps: float = 0.0) -> np.ndarray:
    """Spectral coefficients of ``J_ts`` evaluated at ``y_s = y``."""
    if not t > s:
        raise ValueError(f"step needs s < t, got s={s}, t={t}")
    if f.N != crp.N:
        raise ValueError(f"field has {f.N} components but the signal has {crp.N}")
    g = crp.grid
    rough = scheme in ("rough2", "rough2_regularized", "rough3") and not f.additive
    order = 0 if not rough else (2 if scheme == "rough3" else 1)
    F = _payloads(f, y, order)
    smooth = np.exp(-g.eigenvalues * eps) if eps > 0 else None

    def spec(vals):
        c = g.fft(vals)
        return c * smooth if smooth is not None else c

    acc = np.einsum("i...,i...->...", crp.multiplier(1, s, t), spec(F[0]))
    if not rough:
        return acc
    F0, F1 = F[0], F[1]
    if scheme in ("rough2", "rough3") and include_xa:
        for i in range(f.N):
            acc = acc + crp.xxa_op(s, t, i, y, GridFunction.from_values(g, F1[i])).coeffs
    P2 = F0[None, :] * F1[:, None]  # [i, j] -> f_j f_i'
    acc = acc + np.einsum("ij...,ij...->...", crp.multiplier(2, s, t), spec(P2))
    if scheme == "rough3":
        F2 = F[2]
        P3 = F0[None, None, :] * F1[None, :, None] * F1[:, None, None] + (
            F0[None, :, None] * F0[None, None, :] * F2[:, None, None]
        )
        acc = acc + np.einsum("abc...,abc...->...", crp.multiplier(3, s, t), spec(P3))
    return acc


def step(y: GridFunction, s: float, t: float, crp: ConvolutionalRoughPath, f: Nonlinearity,
         scheme: str, include_xa: bool = True, eps: float = 0.0) -> GridFunction:
    """``y_t = S_{t-s} y_s + J_ts`` for the named scheme."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "rough2_regularized" and not eps > 0:
        raise ValueError("the regularized scheme needs eps > 0")
    if scheme == "rough3" and not crp.signal.has_level3:
        raise ValueError("rough3 needs a level-3 lift")
    J = _increment(y, s, t, crp, f, scheme, include_xa, eps)
    coeffs = y.coeffs * np.exp(-crp.grid.eigenvalues * (t - s)) + J
    return GridFunction(crp.grid, coeffs, real=y.real, _project=False)


def step_young(y, s, t, crp, f):
    return step(y, s, t, crp, f, "young_euler")


def step_rough2(y, s, t, crp, f, include_xa: bool = True):
    return step(y, s, t, crp, f, "rough2", include_xa)


def step_regularized(y, s, t, crp, f, eps: float):
    return step(y, s, t, crp, f, "rough2_regularized", eps=eps)


def step_rough3(y, s, t, crp, f, include_xa: bool = True):
    return step(y, s, t, crp, f, "rough3", include_xa)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(eq=False)
class ControlledPath:
    """Solution values on a coarse grid; Gubinelli derivatives are read off ``f(y)``."""

    grid: TimeGrid
    y: list[GridFunction]
    field: Nonlinearity
    order: int = 2
    diagnostics: dict = field(default_factory=dict)

    def yx(self, k: int) -> list[GridFunction]:
        """``y^{x,i}_{t_k} = f_i(y_{t_k})`` (projected onto the band)."""
        g = self.y[k].grid
        F = self.field.derivs(g.coords, self.y[k].values, 0)
        return [GridFunction.from_values(g, F[i]) for i in range(self.field.N)]

    def yxx(self, k: int) -> list[list[GridFunction]]:
        """``y^{xx,ij}_{t_k} = f_j f_i'`` at ``y_{t_k}``."""
        g = self.y[k].grid
        F0 = self.field.derivs(g.coords, self.y[k].values, 0)
        F1 = self.field.derivs(g.coords, self.y[k].values, 1)
        N = self.field.N
        return [[GridFunction.from_values(g, F0[j] * F1[i]) for j in range(N)] for i in range(N)]


@dataclass
class RemainderReport:
    gaps: list[float]
    y_sharp: list[float]
    y_sharp_exponent: float
    yx_sharp: list[float]
    yx_sharp_exponent: float
    target: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolveReport:
    config: SolverConfig
    path: ControlledPath
    norms: list[float]
    remainder: RemainderReport | None
    wall_time: float
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> GridFunction:
        return self.path.y[-1]

    def to_dict(self) -> dict:
        """Deterministic summary (no timings)."""
        fin = self.final
        return {
            "config": asdict(self.config),
            "field": self.path.field.name,
            "times": [float(t) for t in self.path.grid.points],
            "l2_norms": [float(v) for v in self.norms],
            "final_sup_norm": float(fin.norm(np.inf)),
            "final_l2_norm": float(fin.norm(2)),
            "remainder": None if self.remainder is None else _finite(self.remainder.as_dict()),
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True)

    def write(self, path, snapshot_dir=None) -> None:
        """Write the JSON report, a wall-time sidecar, and snapshots at the configured stride."""
        from pathlib import Path

        path = Path(path)
        path.write_text(self.to_json() + "\n")
        path.with_suffix(".walltime.log").write_text(f"wall_time_seconds={self.wall_time:.3f}\n")
        stride = self.config.snapshot_stride
        if stride and snapshot_dir is not None:
            d = Path(snapshot_dir)
            d.mkdir(parents=True, exist_ok=True)
            for k in range(0, len(self.path.y), stride):
                save_grid_function(self.path.y[k], d / f"y_{k:06d}.rhgf")


def _finite(obj):
    """Replace non-finite floats by strings so the JSON stays standard."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _coarse_grid(crp: ConvolutionalRoughPath, steps: int) -> TimeGrid:
    fine = crp.time_grid
    if fine.cells % steps:
        raise ValueError(f"{steps} steps do not divide the {fine.cells} fine cells")
    return fine.subgrid(fine.cells // steps)


def _march(psi, times, crp, f, cfg: SolverConfig):
    ceiling = cfg.ceiling_factor * (psi.norm() if psi.norm() > 0 else 1.0)
    ys, norms = [psi], [psi.norm()]
    y = psi
    for k in range(len(times) - 1):
        y = step(y, times[k], times[k + 1], crp, f, cfg.scheme, cfg.include_xa, cfg.eps)
        n = y.norm()
        if not math.isfinite(n) or n > ceiling:
            raise BlowUpError(float(times[k + 1]), k + 1, n, ceiling)
        ys.append(y)
        norms.append(n)
    return ys, norms


def solve(config: SolverConfig, psi: GridFunction, crp: ConvolutionalRoughPath, f: Nonlinearity) -> SolveReport:
    """Run the configured scheme over ``config.steps`` equal coarse steps on the signal's horizon."""
    config.validate()
    if config.scheme == "rough3" and not crp.signal.has_level3:
        raise ValueError("rough3 needs a level-3 lift")
    t0 = time.perf_counter()
    coarse = _coarse_grid(crp, config.steps)
    ys, norms = _march(psi, coarse.points, crp, f, config)
    path = ControlledPath(coarse, ys, f, order=3 if config.scheme == "rough3" else 2)
    rem = None
    if config.audit and f.N > 0 and config.steps >= 8:
        rem = controlled_remainder_audit(path, crp, config.kappa)
    return SolveReport(config, path, norms, rem, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# closed-form references


def commuting_flow_solution(psi: GridFunction, crp: ConvolutionalRoughPath, c: Sequence[float], t: float) -> GridFunction:
    """Exact solution ``exp(sum_i c_i dx^i_t0) S_t psi`` for ``f_i = c_i phi``."""
    dx = crp.signal.increment(0.0, t)
    return apply_heat(psi, t) * float(np.exp(np.dot(c, dx)))


def additive_solution(psi: GridFunction, crp: ConvolutionalRoughPath, g: Sequence[GridFunction], t: float) -> GridFunction:
    """Exact mild solution ``S_t psi + sum_i X^{x,i}_t0(g_i)`` for eta-independent fields."""
    out = apply_heat(psi, t)
    for i, gi in enumerate(g):
        out = out + crp.xx_op(0.0, t, i, gi)
    return out


# ---------------------------------------------------------------------------
# audits


def _dyadic_pairs(n: int, min_cells: int = 2, max_pairs: int = 48):
    gaps = []
    m = min_cells
    while m <= n // 2:
        gaps.append(m)
        m *= 2
    for gcell in gaps:
        starts = np.arange(0, n - gcell + 1)
        if starts.size > max_pairs:
            starts = starts[np.linspace(0, starts.size - 1, max_pairs).round().astype(int)]
        yield gcell, [(int(a), int(a + gcell)) for a in starts]


def controlled_remainder_audit(path: ControlledPath, crp: ConvolutionalRoughPath, kappa: float,
                               min_cells: int = 2, max_pairs: int = 48) -> RemainderReport:
    """Measured Hoelder exponents of the controlled remainders along a solved path.

    ``y#_ts = dhat y_ts - sum_i X^{x,i}_ts y^{x,i}_s`` (minus ``sum X^{xx,ij}_ts y^{xx,ij}_s``
    at order 3) and ``y^{x,#}`` = ``delta y^x`` (order 2) or
    ``delta y^{x,i} - sum_j dx^j y^{xx,ij}`` (order 3).  Exponents are slopes of
    ``log max ||.||`` against ``log gap`` over dyadic gaps of at least ``min_cells``.
    """
    pts = path.grid.points
    n = len(pts) - 1
    N = path.field.N
    gaps, ys_sizes, yx_sizes = [], [], []
    yx_cache: dict = {}
    yxx_cache: dict = {}

    def yx(k):
        if k not in yx_cache:
            yx_cache[k] = path.yx(k)
        return yx_cache[k]

    def yxx(k):
        if k not in yxx_cache:
            yxx_cache[k] = path.yxx(k)
        return yxx_cache[k]

    for gcell, pairs in _dyadic_pairs(n, min_cells, max_pairs):
        ymax = yxmax = 0.0
        for a, b in pairs:
            s, t = pts[a], pts[b]
            r = path.y[b] - apply_heat(path.y[a], t - s)
            for i in range(N):
                r = r - crp.xx_op(s, t, i, yx(a)[i])
            dx = crp.signal.increment(s, t)
            if path.order >= 3:
                for i in range(N):
                    for j in range(N):
                        r = r - crp.xxx2_op(s, t, i, j, yxx(a)[i][j])
            ymax = max(ymax, r.norm())
            for i in range(N):
                q = yx(b)[i] - yx(a)[i]
                if path.order >= 3:
                    for j in range(N):
                        q = q - yxx(a)[i][j] * float(dx[j])
                yxmax = max(yxmax, q.norm())
        gaps.append(float(pts[gcell] - pts[0]))
        ys_sizes.append(ymax)
        yx_sizes.append(yxmax)
    return RemainderReport(
        gaps=gaps,
        y_sharp=ys_sizes,
        y_sharp_exponent=fit_holder_exponent(gaps, ys_sizes) if gaps else math.inf,
        yx_sharp=yx_sizes,
        yx_sharp_exponent=fit_holder_exponent(gaps, yx_sizes) if gaps else math.inf,
        target=2 * kappa,
    )


def _l2(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.abs(v) ** 2)))


def taylor_audit(path: ControlledPath, crp: ConvolutionalRoughPath, order: int = 2,
                 min_cells: int = 2, max_pairs: int = 48) -> dict:
    """Measured exponent of the Taylor remainder of ``delta f_i(y)``.

    order 2: ``delta f_i(y)_ts - f_i'(y_s)(a_ts y_s) - sum_j dx^j_ts f_j f_i'``
    order 3: additionally minus ``sum_jk x2[j,k]_ts f_k f_j' f_i'``
    and ``sum_jk sym(x2)[j,k]_ts f_j f_k f_i''``.
    """
    if order not in (2, 3):
        raise ValueError("order must be 2 or 3")
    f = path.field
    pts = path.grid.points
    n = len(pts) - 1
    sig = crp.signal
    gaps, sizes = [], []
    for gcell, pairs in _dyadic_pairs(n, min_cells, max_pairs):
        worst = 0.0
        for a, b in pairs:
            s, t = pts[a], pts[b]
            ya = path.y[a]
            xi = ya.grid.coords
            F0, F1, F2 = (f.derivs(xi, ya.values, m) for m in range(3))
            dF = f.derivs(xi, path.y[b].values, 0) - F0
            ay = apply_heat(ya, t - s).values - ya.values
            dx = sig.increment(s, t)
            r = dF - F1 * ay - F1 * np.tensordot(dx, F0, axes=1)
            if order == 3:
                x2 = sig.area(s, t)
                sym = 0.5 * (x2 + x2.T)
                r = r - F1 * np.einsum("jk,k...,j...->...", x2, F0, F1)
                r = r - F2 * np.einsum("jk,j...,k...->...", sym, F0, F0)
            worst = max(worst, max(_l2(r[i]) for i in range(f.N)))
        gaps.append(float(pts[gcell] - pts[0]))
        sizes.append(worst)
    return {"gaps": gaps, "sizes": sizes, "exponent": fit_holder_exponent(gaps, sizes) if gaps else math.inf}


# ---------------------------------------------------------------------------
# Picard iteration


@dataclass
class PicardReport:
    """Accepted Picard pieces; ``iterations`` counts applications of the map until the fixed point."""

    times: list[float]
    values: list[GridFunction]
    intervals: list[tuple[float, float]]
    factors: list[list[float]]
    iterations: list[int]
    rejected: list[tuple[float, float, float]]
    sew_rates: list[float]

    @property
    def final(self) -> GridFunction:
        return self.values[-1]

    @property
    def bisections(self) -> int:
        return len(self.rejected)


def _holder0(diffs: list[GridFunction], times: np.ndarray, kappa: float) -> float:
    """``sup ||d_t|| + sup ||d_t - S_{t-s} d_s|| / (t-s)^kappa`` over the Picard nodes."""
    sup = max(d.norm() for d in diffs)
    hol = 0.0
    for a in range(len(diffs)):
        for b in range(a + 1, len(diffs)):
            tau = times[b] - times[a]
            hol = max(hol, (diffs[b] - apply_heat(diffs[a], tau)).norm() / tau**kappa)
    return sup + hol


def _picard_once(T0, T1, psi, crp, f, cfg: SolverConfig):
    fine = crp.time_grid
    i0, i1 = fine.index_of(T0), fine.index_of(T1)
    span = i1 - i0
    cells = min(cfg.picard_cells, span)
    if span % cells:
        raise ValueError(f"{cells} Picard cells do not divide {span} fine cells")
    times = fine.points[i0 : i1 + 1 : span // cells]
    y = [psi] * len(times)
    factors, prev = [], None
    converged = False
    it = 0
    for it in range(1, cfg.picard_max_iter + 1):
        z = [psi]
        for k in range(len(times) - 1):
            J = _increment(y[k], times[k], times[k + 1], crp, f, cfg.scheme, cfg.include_xa, cfg.eps)
            coeffs = apply_heat(z[k], times[k + 1] - times[k]).coeffs + J
            z.append(GridFunction(crp.grid, coeffs, real=psi.real, _project=False))
        d = _holder0([a - b for a, b in zip(z, y)], times, cfg.kappa)
        if prev is not None and prev > 0:
            factors.append(d / prev)
        prev = d
        y = z
        scale = 1.0 + max(v.norm() for v in y)
        if d <= cfg.picard_tol * scale:
            converged = True
            break
    # the converged pass only confirms the fixed point reached one iteration earlier
    return times, y, factors, converged, it - 1 if converged else it


def picard_solve(interval: tuple[float, float], psi: GridFunction, crp: ConvolutionalRoughPath,
                 f: Nonlinearity, config: SolverConfig) -> PicardReport:
    """Fixed-point iteration ``y -> Gamma(y)`` with ``dhat Gamma(y) = J(y)`` on a Picard grid.

    An interval is rejected when the iteration does not converge or any
    measured contraction factor reaches 1; it is then bisected and solved
    piecewise, restarting from the terminal value of the left half.  Each
    accepted piece is certified by sewing ``J`` of the fixed point.
    """
    config.validate()
    report = PicardReport([], [], [], [], [], [], [])
    E = HeatFamily(crp.grid)

    def run(T0, T1, start, depth):
        times, y, factors, ok, it = _picard_once(T0, T1, start, crp, f, config)
        worst = max(factors) if factors else 0.0
        if (not ok or worst >= 1.0) and depth < config.picard_max_bisections:
            report.rejected.append((float(T0), float(T1), float(worst)))
            mid = crp.time_grid.points[(crp.time_grid.index_of(T0) + crp.time_grid.index_of(T1)) // 2]
            left = run(T0, mid, start, depth + 1)
            return run(mid, T1, left, depth + 1)
        if not ok:
            raise RuntimeError(f"Picard iteration failed on [{T0}, {T1}] (factor {worst:.3g})")
        # sewing certificate on the fixed point
        idx = {float(t): k for k, t in enumerate(times)}
        g = lambda t, s: GridFunction(crp.grid, _increment(y[idx[float(s)]], s, t, crp, f, config.scheme,
                                                           config.include_xa, config.eps), real=True, _project=False)
        cells = len(times) - 1
        rate = math.nan
        if cells >= 4 and cells & (cells - 1) == 0:
            try:
                _, rep = sew(g, times[0], times[-1], E, int(math.log2(cells)), grid=crp.time_grid)
                rate = rep.rate
            except SewingDivergenceError:
                rate = -math.inf
        if report.times:
            report.times.extend(float(t) for t in times[1:])
            report.values.extend(y[1:])
        else:
            report.times.extend(float(t) for t in times)
            report.values.extend(y)
        report.intervals.append((float(T0), float(T1)))
        report.factors.append(factors)
        report.iterations.append(it)
        report.sew_rates.append(rate)
        return y[-1]

    run(float(interval[0]), float(interval[1]), psi, 0)
    return report
