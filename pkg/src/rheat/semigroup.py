"""Periodic spectral heat semigroup on the torus [0, 2*pi)^n.

Fields are stored by their Fourier coefficients on the full FFT layout of a
``P^n`` grid, with every mode outside the retained band ``|k_j| <= K`` set to
zero.  All operators of interest (``S_t``, ``a_t = S_t - id``, the Laplacian,
fractional powers) are diagonal in this basis, so they act by multiplying the
coefficient array with a function of the eigenvalue ``lambda_k = |k|^2``.

Norms use the normalized measure ``(2*pi)^{-n} dxi``, so constants have norm 1.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "SpectralGrid",
    "GridFunction",
    "HeatFamily",
    "apply_heat",
    "apply_a",
    "apply_generator",
    "frac_laplacian",
    "lp_norm",
    "sobolev_norm",
    "strichartz_norm",
    "pointwise_product",
    "save_grid_function",
    "load_grid_function",
    "export_csv",
    "semigroup_estimates",
]

_GF_MAGIC = b"RHGF"
_GF_VERSION = 1


@dataclass(frozen=True)
class SpectralGrid:
    """Torus discretization: ``n`` axes, modes ``|k_j| <= K``, ``P`` points per axis."""

    n: int = 1
    K: int = 64
    P: int = 256

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError(f"only n = 1 or 2 is supported, got n={self.n}")
        if self.K < 0:
            raise ValueError("K must be nonnegative")
        if self.P < 2 or self.P & (self.P - 1):
            raise ValueError(f"P must be a power of two >= 2, got {self.P}")
        if self.P < 2 * self.K + 1:
            raise ValueError(f"P={self.P} cannot represent K={self.K} modes (need P >= 2K+1)")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.P,) * self.n

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return np.rint(np.fft.fftfreq(self.P, d=1.0 / self.P)).astype(int)

    @cached_property
    def kvec(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.wavenumbers] * self.n), indexing="ij"))

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """``|k|^2`` on the full FFT layout (the spectrum of ``-Laplacian``)."""
        return sum(k.astype(float) ** 2 for k in self.kvec)

    @cached_property
    def band(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        for k in self.kvec:
            mask &= np.abs(k) <= self.K
        return mask

    @cached_property
    def _unique(self):
        lam = self.eigenvalues[self.band]
        uniq, inv = np.unique(lam, return_inverse=True)
        return uniq, inv

    @property
    def unique_eigenvalues(self) -> np.ndarray:
        """Distinct eigenvalues inside the band; multipliers are computed on these."""
        return self._unique[0]

    def expand(self, values: np.ndarray) -> np.ndarray:
        """Map values indexed by ``unique_eigenvalues`` (last axis) onto the FFT layout.

        Leading axes of ``values`` are kept.  Modes outside the band get zero.
        """
        values = np.asarray(values)
        lead = values.shape[:-1]
        out = np.zeros(lead + self.shape, dtype=np.result_type(values.dtype, float))
        out[(...,) + (self.band,)] = values[..., self._unique[1]]
        return out

    @cached_property
    def coords(self) -> np.ndarray:
        """Physical grid points, shape ``(n,) + shape``."""
        x = 2.0 * np.pi * np.arange(self.P) / self.P
        return np.stack(np.meshgrid(*([x] * self.n), indexing="ij"))

    @property
    def size(self) -> int:
        return self.P**self.n

    def fft(self, values: np.ndarray) -> np.ndarray:
        axes = tuple(range(-self.n, 0))
        return np.fft.fftn(values, axes=axes) / self.size

    def ifft(self, coeffs: np.ndarray) -> np.ndarray:
        axes = tuple(range(-self.n, 0))
        return np.fft.ifftn(coeffs, axes=axes) * self.size


class GridFunction:
    """A band-limited field with synchronized spectral and physical views.

    Immutable: arithmetic returns new instances.  ``real`` marks fields whose
    physical samples are real (Hermitian-symmetric spectrum); ``values`` then
    returns a real array.
    """

    __slots__ = ("grid", "coeffs", "real", "_values")

    def __init__(self, grid: SpectralGrid, coeffs: np.ndarray, real: bool = True, _project=True):
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.shape != grid.shape:
            raise ValueError(f"coefficient shape {coeffs.shape} does not match grid {grid.shape}")
        if _project:
            coeffs = np.where(grid.band, coeffs, 0.0)
        coeffs.setflags(write=False)
        self.grid = grid
        self.coeffs = coeffs
        self.real = bool(real)
        self._values = None

    @classmethod
    def from_values(cls, grid: SpectralGrid, values) -> GridFunction:
        """Project physical samples onto the retained band."""
        values = np.broadcast_to(np.asarray(values), grid.shape)
        real = not np.iscomplexobj(values)
        return cls(grid, grid.fft(values), real=real)

    @classmethod
    def from_function(cls, grid: SpectralGrid, fn) -> GridFunction:
        return cls.from_values(grid, fn(*grid.coords))

    @classmethod
    def zeros(cls, grid: SpectralGrid) -> GridFunction:
        return cls(grid, np.zeros(grid.shape, dtype=complex), _project=False)

    @classmethod
    def constant(cls, grid: SpectralGrid, c: float = 1.0) -> GridFunction:
        coeffs = np.zeros(grid.shape, dtype=complex)
        coeffs[(0,) * grid.n] = c
        return cls(grid, coeffs, real=not isinstance(c, complex), _project=False)

    @classmethod
    def random(cls, grid: SpectralGrid, rng, kmax: int | None = None, decay: float = 1.0) -> GridFunction:
        """Random real field with modes ``|k| <= kmax`` and amplitude ``(1+|k|)^-decay``."""
        kmax = grid.K if kmax is None else min(kmax, grid.K)
        lam = grid.eigenvalues
        mask = grid.band & (np.sqrt(lam) <= kmax)
        amp = (1.0 + np.sqrt(lam)) ** (-decay)
        noise = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        coeffs = np.where(mask, amp * noise, 0.0)
        # Hermitian symmetrization keeps the field real.
        values = grid.ifft(coeffs).real
        return cls.from_values(grid, values)

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            v = self.grid.ifft(self.coeffs)
            v = v.real if self.real else v
            v.setflags(write=False)
            self._values = v
        return self._values

    def with_multiplier(self, mult: np.ndarray) -> GridFunction:
        """Apply a diagonal operator given on the FFT layout."""
        return GridFunction(self.grid, self.coeffs * mult, real=self.real, _project=False)

    def _check(self, other: GridFunction):
        if not isinstance(other, GridFunction) or other.grid != self.grid:
            raise ValueError("grid mismatch")

    def __add__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return GridFunction(self.grid, self.coeffs + other.coeffs, self.real and other.real, False)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return GridFunction(self.grid, self.coeffs - other.coeffs, self.real and other.real, False)
        return NotImplemented

    def __neg__(self):
        return GridFunction(self.grid, -self.coeffs, self.real, False)

    def __mul__(self, other):
        if isinstance(other, GridFunction):
            return pointwise_product(self, other)
        if np.isscalar(other):
            real = self.real and not np.iscomplexobj(other)
            return GridFunction(self.grid, self.coeffs * other, real, False)
        return NotImplemented

    __rmul__ = __mul__

    def norm(self, p: float = 2) -> float:
        return lp_norm(self, p)

    def max_abs_diff(self, other: GridFunction) -> float:
        self._check(other)
        return float(np.max(np.abs(self.values - other.values)))

    def __repr__(self):
        return f"GridFunction(n={self.grid.n}, K={self.grid.K}, P={self.grid.P}, L2={self.norm():.6g})"


def _check_tau(tau: float):
    if tau < 0:
        raise ValueError(f"semigroup time must be nonnegative, got {tau}")


def heat_multiplier(grid: SpectralGrid, tau: float) -> np.ndarray:
    return np.exp(-grid.eigenvalues * tau)


def apply_heat(phi: GridFunction, tau: float) -> GridFunction:
    _check_tau(tau)
    if tau == 0:
        return phi
    return phi.with_multiplier(heat_multiplier(phi.grid, tau))


def apply_a(phi: GridFunction, tau: float) -> GridFunction:
    """``a_tau = S_tau - id``; kills the constant mode."""
    _check_tau(tau)
    return phi.with_multiplier(np.expm1(-phi.grid.eigenvalues * tau))


def apply_generator(phi: GridFunction) -> GridFunction:
    return phi.with_multiplier(-phi.grid.eigenvalues)


def frac_laplacian(phi: GridFunction, alpha: float) -> GridFunction:
    """``(-Laplacian)^alpha``, with the zero mode mapped to 0 for every alpha."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    lam = phi.grid.eigenvalues
    mult = np.zeros_like(lam)
    pos = lam > 0
    mult[pos] = lam[pos] ** alpha
    return phi.with_multiplier(mult)


def lp_norm(phi: GridFunction, p: float = 2) -> float:
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    v = np.abs(phi.values)
    if np.isinf(p):
        return float(v.max())
    return float(np.mean(v**p) ** (1.0 / p))


def sobolev_norm(phi: GridFunction, alpha: float, p: float = 2) -> float:
    """``||phi||_{L^p} + ||(-Laplacian)^alpha phi||_{L^p}``."""
    if p < 1 or (not np.isinf(p) and int(p) != p):
        raise ValueError(f"p must be an integer >= 1, got {p}")
    return lp_norm(phi, p) + lp_norm(frac_laplacian(phi, alpha), p)


def pointwise_product(phi: GridFunction, psi: GridFunction, dealias: bool = False) -> GridFunction:
    """Sample-wise product, projected back onto the band.

    With ``dealias`` the product is formed on a zero-padded grid of at least
    ``3K+1`` points per axis, so the retained modes are free of aliasing.
    """
    phi._check(psi)
    grid = phi.grid
    real = phi.real and psi.real
    if not dealias or grid.P >= 3 * grid.K + 1:
        return GridFunction(grid, grid.fft(phi.values * psi.values), real=real)
    Q = 1
    while Q < 3 * grid.K + 1:
        Q *= 2
    big = SpectralGrid(grid.n, grid.K, Q)
    a = _regrid(phi.coeffs, grid, big)
    b = _regrid(psi.coeffs, grid, big)
    prod = big.fft(big.ifft(a) * big.ifft(b))
    return GridFunction(grid, _regrid(prod, big, grid), real=real)


def _regrid(coeffs: np.ndarray, src: SpectralGrid, dst: SpectralGrid) -> np.ndarray:
    out = np.zeros(dst.shape, dtype=complex)
    K = min(src.K, dst.K)
    idx_src = np.r_[0 : K + 1, src.P - K : src.P] if K else np.array([0])
    idx_dst = np.r_[0 : K + 1, dst.P - K : dst.P] if K else np.array([0])
    out[np.ix_(*([idx_dst] * src.n))] = coeffs[np.ix_(*([idx_src] * src.n))]
    return out


def strichartz_norm(
    f: GridFunction, alpha: float, p: float = 2, n_r: int = 48, n_eta: int = 24, r_min: float = 1e-4
) -> float:
    """``||f||_{L^p} + ||T_alpha f||_{L^p}`` with the Strichartz difference functional.

    ``T_alpha f(xi)^2 = int_0^1 r^{-1-4 alpha} [int_{|eta|<=1} |f(xi + r eta) - f(xi)| d eta]^2 dr``.
    Shifts are evaluated spectrally (exact for band-limited fields).  The
    r-integral uses Gauss-Legendre nodes in ``log r`` on ``[r_min, 1]`` plus
    the first-order Taylor tail on ``(0, r_min)``.
    """
    if not 0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2), got {alpha}")
    grid = f.grid
    n = grid.n
    # eta quadrature on the unit ball (Lebesgue measure)
    g, w = np.polynomial.legendre.leggauss(n_eta)
    if n == 1:
        etas = g[:, None]
        eta_w = w
        abs_eta_mean = 1.0  # int_{-1}^{1} |eta| d eta
    else:
        # polar nodes: radius in (0,1) with weight rho, angle uniform
        rho = 0.5 * (g + 1.0)
        wr = 0.5 * w * rho
        n_th = 2 * n_eta
        th = 2 * np.pi * np.arange(n_th) / n_th
        etas = np.array([[r * np.cos(t), r * np.sin(t)] for r in rho for t in th])
        eta_w = np.array([wr_i * 2 * np.pi / n_th for wr_i in wr for _ in th])
        abs_eta_mean = 4.0 / 3.0  # int_{|eta|<=1} |eta_1| d eta
    gr, wr_ = np.polynomial.legendre.leggauss(n_r)
    lo = np.log(r_min)
    logr = lo + 0.5 * (gr + 1.0) * (-lo)
    r_nodes = np.exp(logr)
    r_w = 0.5 * wr_ * (-lo) * r_nodes  # dr = r dlogr

    kvec = np.stack([k.astype(float) for k in grid.kvec])
    base = f.values
    acc = np.zeros(grid.shape)
    for r, rw in zip(r_nodes, r_w):
        inner = np.zeros(grid.shape)
        for eta, ew in zip(etas, eta_w):
            phase = np.exp(1j * r * np.tensordot(eta, kvec, axes=1))
            shifted = grid.ifft(f.coeffs * phase)
            inner += ew * np.abs(shifted - base)
        acc += rw * r ** (-1.0 - 4.0 * alpha) * inner**2
    # tail: |f(xi + r eta) - f(xi)| ~ r |grad f . eta|
    grads = [grid.ifft(f.coeffs * 1j * k) for k in kvec]
    gnorm = np.sqrt(sum(np.abs(gc) ** 2 for gc in grads))
    acc += (abs_eta_mean * gnorm) ** 2 * r_min ** (2.0 - 4.0 * alpha) / (2.0 - 4.0 * alpha)
    T = np.sqrt(acc)
    Tf = np.mean(T**p) ** (1.0 / p)
    return lp_norm(f, p) + float(Tf)


class HeatFamily:
    """Evolution family of the heat semigroup acting on ``GridFunction`` values."""

    def __init__(self, grid: SpectralGrid):
        self.grid = grid

    def apply_S(self, tau, v):
        return apply_heat(v, tau)

    def apply_a(self, tau, v):
        return apply_a(v, tau)


def _band_slices(grid: SpectralGrid):
    """Row-major index arrays for ``k_j = -K..K`` on each axis."""
    ks = np.arange(-grid.K, grid.K + 1)
    return np.mod(ks, grid.P)


def save_grid_function(phi: GridFunction, path) -> None:
    """Binary layout, little-endian:

    ``b"RHGF"``, u32 version, u32 n, u32 K, u32 P, u8 real flag, then the
    ``(2K+1)^n`` retained coefficients in row-major order over ``k_j = -K..K``,
    each as two float64 (real, imaginary).
    """
    Path(path).write_bytes(grid_function_bytes(phi))


def grid_function_bytes(phi: GridFunction) -> bytes:
    g = phi.grid
    idx = _band_slices(g)
    block = phi.coeffs[np.ix_(*([idx] * g.n))]
    buf = io.BytesIO()
    buf.write(_GF_MAGIC)
    buf.write(struct.pack("<IIIIB", _GF_VERSION, g.n, g.K, g.P, int(phi.real)))
    buf.write(np.ascontiguousarray(block).astype("<c16").tobytes())
    return buf.getvalue()


def load_grid_function(path) -> GridFunction:
    data = Path(path).read_bytes()
    if data[:4] != _GF_MAGIC:
        raise ValueError("not a grid-function file")
    version, n, K, P, real = struct.unpack_from("<IIIIB", data, 4)
    if version != _GF_VERSION:
        raise ValueError(f"unsupported grid-function version {version}")
    g = SpectralGrid(n, K, P)
    off = 4 + struct.calcsize("<IIIIB")
    m = 2 * K + 1
    block = np.frombuffer(data, dtype="<c16", count=m**n, offset=off).reshape((m,) * n)
    coeffs = np.zeros(g.shape, dtype=complex)
    idx = _band_slices(g)
    coeffs[np.ix_(*([idx] * n))] = block
    return GridFunction(g, coeffs, real=bool(real), _project=False)


def export_csv(phi: GridFunction, path) -> None:
    """Physical samples as CSV: coordinate columns then value (real, imag if complex)."""
    g = phi.grid
    cols = [c.ravel() for c in g.coords]
    v = phi.values.ravel()
    names = [f"xi{j}" for j in range(g.n)]
    if phi.real:
        cols.append(v)
        names.append("value")
    else:
        cols += [v.real, v.imag]
        names += ["value_re", "value_im"]
    arr = np.column_stack(cols)
    np.savetxt(path, arr, delimiter=",", header=",".join(names), comments="", fmt="%.17g")


def semigroup_estimates(grid: SpectralGrid, rng, n_fields: int = 8, alphas=(0.25, 0.5), levels=range(0, 13)) -> dict:
    """Measured constants of the p = 2 semigroup estimates over dyadic ``tau = 2^-l``.

    Returns per-estimate arrays over tau (max over random band-limited fields):
    contraction ``||S phi|| / ||phi||``, Hoelder ``||a phi|| / (tau^alpha ||phi||_{B_alpha})``,
    regularization ``tau^alpha ||S phi||_{B_alpha} / ||phi||`` and generator
    ``tau^{1-alpha} ||Lap S phi|| / ||phi||_{B_alpha}``.
    """
    fields = [GridFunction.random(grid, rng) for _ in range(n_fields)]
    taus = [2.0 ** (-l) for l in levels]
    out = {"tau": taus, "contraction": []}
    for a in alphas:
        out[f"holder_{a}"] = []
        out[f"regularization_{a}"] = []
        out[f"generator_{a}"] = []
    for tau in taus:
        out["contraction"].append(max(apply_heat(f, tau).norm() / f.norm() for f in fields))
        for a in alphas:
            out[f"holder_{a}"].append(max(apply_a(f, tau).norm() / (tau**a * sobolev_norm(f, a)) for f in fields))
            out[f"regularization_{a}"].append(
                max(tau**a * sobolev_norm(apply_heat(f, tau), a) / f.norm() for f in fields))
            out[f"generator_{a}"].append(
                max(tau ** (1 - a) * apply_generator(apply_heat(f, tau)).norm() / sobolev_norm(f, a) for f in fields))
    return out
