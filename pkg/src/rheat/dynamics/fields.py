"""Vector fields ``f_i(phi)(xi) = sigma_i(xi, phi(xi))`` and their eta-derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..semigroup import GridFunction

__all__ = [
    "Nonlinearity",
    "linear_field",
    "additive_field",
    "sine_field",
    "cutoff_sine_field",
    "zero_field",
    "builtin_field",
    "f_eval",
    "f_prime",
    "f_second",
    "regularity_audit",
    "RegularityReport",
    "bump",
]

# sigma(i, xi, eta, m) -> d^m sigma_i / d eta^m evaluated at (xi, eta);
# xi has shape (n,) + eta.shape.
SigmaFn = Callable[[int, np.ndarray, np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class Nonlinearity:
    """A family ``(f_1, ..., f_N)`` given by ``sigma_i(xi, eta)``.

    ``klass`` is the declared smoothness index (derivatives up to that order
    are bounded), ``bounds[m]`` the declared sup of the m-th eta-derivative,
    ``cutoff`` the support radius in ``xi`` around the torus centre (None if
    the field is not compactly supported).  ``additive`` fields do not
    depend on ``eta``; ``oracle_only`` marks fields admitted only for closed-form
    comparisons.
    """

    name: str
    N: int
    sigma: SigmaFn = field(repr=False)
    klass: int = 4
    bounds: tuple[float, ...] = ()
    cutoff: float | None = None
    additive: bool = False
    oracle_only: bool = False
    params: dict = field(default_factory=dict, compare=False)

    def derivs(self, xi: np.ndarray, eta: np.ndarray, m: int) -> np.ndarray:
        """``d^m sigma_i`` for every component, shape ``(N,) + eta.shape``."""
        return np.stack([np.broadcast_to(self.sigma(i, xi, eta, m), eta.shape) for i in range(self.N)])


def _check_real(phi: GridFunction):
    if not phi.real:
        raise ValueError("nonlinearities act on real-valued fields only")


def _compose(f: Nonlinearity, i: int, phi: GridFunction, m: int) -> GridFunction:
    _check_real(phi)
    if not 0 <= i < f.N:
        raise IndexError(f"component {i} out of range for N={f.N}")
    vals = np.broadcast_to(f.sigma(i, phi.grid.coords, phi.values, m), phi.grid.shape)
    return GridFunction.from_values(phi.grid, np.asarray(vals, dtype=float))


def f_eval(f: Nonlinearity, i: int, phi: GridFunction) -> GridFunction:
    return _compose(f, i, phi, 0)


def f_prime(f: Nonlinearity, i: int, phi: GridFunction) -> GridFunction:
    return _compose(f, i, phi, 1)


def f_second(f: Nonlinearity, i: int, phi: GridFunction) -> GridFunction:
    return _compose(f, i, phi, 2)


def linear_field(c: Sequence[float]) -> Nonlinearity:
    """``sigma_i = c_i eta``; unbounded, so oracle-only."""
    c = tuple(float(v) for v in c)

    def sigma(i, xi, eta, m):
        if m == 0:
            return c[i] * eta
        if m == 1:
            return np.full_like(eta, c[i])
        return np.zeros_like(eta)

    return Nonlinearity("linear", len(c), sigma, klass=4, bounds=(np.inf, max(abs(v) for v in c)) + (0.0,) * 3,
                        oracle_only=True, params={"c": list(c)})


def additive_field(g: Sequence[Callable[..., np.ndarray]], name: str = "additive") -> Nonlinearity:
    """``sigma_i = g_i(xi)``, independent of eta; the functions take the coordinate arrays."""
    g = tuple(g)

    def sigma(i, xi, eta, m):
        if m == 0:
            return g[i](*xi)
        return np.zeros_like(eta)

    return Nonlinearity(name, len(g), sigma, klass=4, additive=True, oracle_only=True)


def _phase(i: int) -> float:
    return 0.5 * np.pi * i


def sine_field(N: int = 2, scale: float = 1.0) -> Nonlinearity:
    """``sigma_i = scale * sin(eta + i pi/2)``: sin, cos, -sin, ..."""

    def sigma(i, xi, eta, m):
        return scale * np.sin(eta + _phase(i) + 0.5 * np.pi * m)

    return Nonlinearity("sine", N, sigma, klass=4, bounds=(abs(scale),) * 5, params={"scale": scale})


def bump(r: np.ndarray, M: float) -> np.ndarray:
    """Smooth cutoff ``exp(1 - 1/(1 - (r/M)^2))`` on ``|r| < M``, zero outside."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = np.abs(r) < M
    q = (r[inside] / M) ** 2
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - q))
    return out


def cutoff_sine_field(M: float = 2.0, N: int = 2, scale: float = 1.0) -> Nonlinearity:
    """``sigma_i = chi_M(|xi - centre|) * scale * sin(eta + i pi/2)`` with centre ``(pi, ..., pi)``."""
    if not 0 < M <= np.pi:
        raise ValueError("cutoff radius must lie in (0, pi]")

    def sigma(i, xi, eta, m):
        r = np.sqrt(np.sum((np.asarray(xi) - np.pi) ** 2, axis=0))
        return bump(r, M) * scale * np.sin(eta + _phase(i) + 0.5 * np.pi * m)

    return Nonlinearity("cutoff_sine", N, sigma, klass=4, bounds=(abs(scale),) * 5, cutoff=M,
                        params={"M": M, "scale": scale})


def zero_field(N: int = 1) -> Nonlinearity:
    def sigma(i, xi, eta, m):
        return np.zeros_like(eta)

    return Nonlinearity("zero", N, sigma, klass=4, bounds=(0.0,) * 5, additive=True)


def builtin_field(name: str, N: int = 2, **params) -> Nonlinearity:
    """Construct a builtin field by name (used by the CLI)."""
    if name == "linear":
        c = params.get("c", [1.0] * N)
        return linear_field(c if np.ndim(c) else [c] * N)
    if name == "sine":
        return sine_field(N, params.get("scale", 1.0))
    if name == "cutoff_sine":
        return cutoff_sine_field(params.get("M", 2.0), N, params.get("scale", 1.0))
    if name == "zero":
        return zero_field(N)
    if name == "additive":
        return additive_field([(lambda *x, k=k: np.cos((k + 1) * x[0])) for k in range(N)], "additive")
    raise ValueError(f"unknown field {name!r}")


@dataclass
class RegularityReport:
    """Observed sups of ``d^m sigma`` (eta) and ``d_xi d^m sigma`` over a sampling lattice."""

    eta_sups: list[float]
    xi_sups: list[float]
    bounded: bool
    respects_bounds: bool
    support_ok: bool | None
    oracle_only: bool
    flags: list[str]


def regularity_audit(f: Nonlinearity, k: int | None = None, n_xi: int = 64, n_eta: int = 81,
                     eta_max: float = 50.0, n: int = 1) -> RegularityReport:
    """Sample derivative sups on a lattice in ``xi in [0, 2pi)^n`` and ``|eta| <= eta_max``.

    The eta-range is wide so that growth (unboundedness) shows up as a sup
    increasing with ``eta_max``; xi-derivatives use centred differences.
    """
    k = f.klass if k is None else k
    x1 = 2 * np.pi * np.arange(n_xi) / n_xi
    eta1 = np.linspace(-eta_max, eta_max, n_eta)
    grids = np.meshgrid(*([x1] * n), eta1, indexing="ij")
    xi, eta = np.stack(grids[:-1]), grids[-1]
    hx = 1e-5
    eta_sups, xi_sups = [], []
    for m in range(k + 1):
        d = f.derivs(xi, eta, m)
        eta_sups.append(float(np.abs(d).max()))
        if m <= 3:
            dx = np.zeros_like(d)
            for a in range(n):
                e = np.zeros((n,) + (1,) * eta.ndim)
                e[a] = hx
                dx = np.maximum(dx, np.abs(f.derivs(xi + e, eta, m) - f.derivs(xi - e, eta, m)) / (2 * hx))
            xi_sups.append(float(dx.max()))
    # boundedness: the order-0 sup must not grow when the eta window doubles
    wide = f.derivs(xi, 2 * eta, 0)
    bounded = bool(np.abs(wide).max() <= 1.0001 * eta_sups[0] + 1e-12)
    flags = []
    if not bounded:
        flags.append("unbounded at order 0")
    respects = True
    for m, b in enumerate(f.bounds[: k + 1]):
        if eta_sups[m] > b * (1 + 1e-9) + 1e-12:
            respects = False
            flags.append(f"order {m} sup {eta_sups[m]:.3g} exceeds declared {b:.3g}")
    support_ok = None
    if f.cutoff is not None:
        r = np.sqrt(np.sum((xi - np.pi) ** 2, axis=0))
        outside = r >= f.cutoff
        support_ok = bool(np.all(f.derivs(xi, eta, 0)[:, outside] == 0.0))
        if not support_ok:
            flags.append("nonzero outside the declared support")
    if f.oracle_only:
        flags.append("oracle-only")
    return RegularityReport(eta_sups, xi_sups, bounded, respects, support_ok, f.oracle_only, flags)
