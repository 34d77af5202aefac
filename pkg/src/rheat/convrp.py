"""Convolutional rough path: heat-semigroup convolutions of a lifted signal.

With ``A`` the Laplacian and ``S`` the heat semigroup, and the index
conventions of :mod:`rheat.signal`::

    X^{x,i}_ts       = int_s^t S_{t-u} dx^i_u
    X^{ax,i}_ts      = X^{x,i}_ts - dx^i_ts
    X^{xx,ij}_ts     = int_s^t S_{t-u} dx^i_u (x^j_u - x^j_s)
                     = x2[i,j]_ts + int_s^t A S_{t-u} x2[i,j]_us du
    X^{axx,ij}_ts    = X^{xx,ij}_ts - x2[i,j]_ts
    X^{xxx,abc}_ts   = int_s^t S_{t-u} dx^a_u x2[b,c]_us
    X^{xa,i}_ts(phi, psi) = int_s^t X^{x,i}_{t-u}(A S_{u-s} phi . psi) du

All but ``X^xa`` are Fourier multipliers.  Their kernels are computed per
fine cell in closed form: on a cell the polyline lift is polynomial in ``u``
so ``int lam e^{-lam (t-u)} poly(u) du`` is an exponential-polynomial
antiderivative.  ``X^xa`` uses the trapezoid rule at fine-grid nodes.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .semigroup import GridFunction, SpectralGrid, apply_heat
from .signal import RoughSignal

__all__ = ["ConvolutionalRoughPath", "phi1", "g_moments", "RelationReport"]

_SERIES_TERMS = 20


def phi1(z: np.ndarray) -> np.ndarray:
    """``(1 - e^{-z}) / z`` with the value 1 at ``z = 0``."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = z > 1e-300
    out[nz] = -np.expm1(-z[nz]) / z[nz]
    return out


@lru_cache(maxsize=8)
def _series_coefficients(kmax: int) -> np.ndarray:
    """``k! / (n+k+1)!`` for ``k = 0..kmax`` (rows) and ``n < _SERIES_TERMS``."""
    return np.array([[math.factorial(k) / math.factorial(m + k + 1) for m in range(_SERIES_TERMS)]
                     for k in range(kmax + 1)])


def g_moments(z: np.ndarray, kmax: int) -> np.ndarray:
    """``g_k(z) = int_0^1 z e^{-z(1-s)} s^k ds`` for ``k = 0..kmax``; shape ``(kmax+1,) + z.shape``.

    Power series for ``z < 1`` (the forward recurrence loses digits there),
    the recurrence ``g_k = 1 - k g_{k-1} / z`` otherwise.
    """
    z = np.asarray(z, dtype=float)
    out = np.empty((kmax + 1,) + z.shape)
    small = z < 1.0
    zs = z[small]
    # z * sum_n (-z)^n k! / (n+k+1)!  as one Vandermonde product
    coef = _series_coefficients(kmax)
    V = np.empty((zs.size, _SERIES_TERMS))
    V[:, 0] = 1.0
    np.cumprod(np.broadcast_to(-zs[:, None], (zs.size, _SERIES_TERMS - 1)), axis=1, out=V[:, 1:])
    out[:, small] = (zs[:, None] * (V @ coef.T)).T
    zl = z[~small]
    g = -np.expm1(-zl)
    out[0][~small] = g
    for k in range(1, kmax + 1):
        g = 1.0 - k * g / zl
        out[k][~small] = g
    return out


@dataclass
class RelationReport:
    """Maximum relative residuals of the algebraic relations over the sampled triples."""

    delta_hat_xx: float
    decomposition_ax: float
    delta_hat_xxx2: float
    delta_hat_xxx3: float | None
    delta_hat_xxa: float | None
    s_eps_commutation: float
    triples: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class ConvolutionalRoughPath:
    """Evaluator for the convolutional rough path of ``signal`` on ``grid``.

    Kernels are cached per ``(level, s_index, t_index)`` for all retained
    eigenvalues at once; insertion is write-once under a lock.
    """

    def __init__(self, signal: RoughSignal, grid: SpectralGrid, cache_size: int = 20_000):
        self.signal = signal
        self.grid = grid
        self.lam = grid.unique_eigenvalues
        self._cache: dict = {}
        self._lock = threading.Lock()
        self._cache_size = cache_size
        t = signal.grid.points
        self._t = t
        self._h = np.diff(t)
        self._d = signal.cell_increments
        self._m = self._d / self._h[:, None]
        self._drift = signal.area_drift
        self._has_drift = bool(np.any(self._drift != 0.0))

    @property
    def N(self) -> int:
        return self.signal.N

    @property
    def time_grid(self):
        return self.signal.grid

    def _idx(self, s: float, t: float) -> tuple[int, int]:
        i0, i1 = self.time_grid.index_of(s), self.time_grid.index_of(t)
        if i0 > i1:
            raise ValueError(f"need s <= t, got s={s}, t={t}")
        return i0, i1

    def _check_component(self, *idx):
        for i in idx:
            if not 0 <= i < self.N:
                raise IndexError(f"component {i} out of range for N={self.N}")

    # kernels ---------------------------------------------------------------

    def _decay(self, i0, i1):
        """``e^{-lam (t - b_j)}`` and ``lam h_j`` for cells j in [i0, i1); shapes (cells, U)."""
        b = self._t[i0 + 1 : i1 + 1]
        tau = self._t[i1] - b
        decay = np.exp(-np.outer(tau, self.lam))
        z = np.outer(self._h[i0:i1], self.lam)
        return decay, z

    def kernel(self, level: int, s: float, t: float) -> np.ndarray:
        """Multipliers on the unique eigenvalues.

        Shapes: level 1 ``(N, U)``, level 2 ``(N, N, U)``, level 3 ``(N, N, N, U)``.
        """
        i0, i1 = self._idx(s, t)
        return self._kernel_idx(level, i0, i1)

    def _kernel_idx(self, level, i0, i1):
        key = (level, i0, i1)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if level == 1:
            val = self._k1(i0, i1)
        elif level == 2:
            val = self._k2(i0, i1)
        elif level == 3:
            val = self._k3(i0, i1)
        else:
            raise ValueError(f"kernel level must be 1, 2 or 3, got {level}")
        val.setflags(write=False)
        with self._lock:
            if len(self._cache) >= self._cache_size:
                self._cache.clear()
            val = self._cache.setdefault(key, val)
        return val

    def _k1(self, i0, i1):
        U, N = self.lam.size, self.N
        if i1 == i0:
            return np.zeros((N, U))
        decay, z = self._decay(i0, i1)
        w = decay * phi1(z)  # (cells, U)
        return np.einsum("cn,cu->nu", self._d[i0:i1], w)

    def _poly_correction(self, i0, i1, coeffs):
        """``sum_j e^{-lam(t-b_j)} sum_k c_k h^k g_k(lam h)``; coeffs[k] has shape (cells, ...)."""
        decay, z = self._decay(i0, i1)
        g = g_moments(z, len(coeffs) - 1)  # (k, cells, U)
        h = self._h[i0:i1]
        out = 0.0
        for k, c in enumerate(coeffs):
            wk = decay * g[k] * (h**k)[:, None]  # (cells, U)
            out = out + np.einsum("c...,cu->...u", c, wk)
        return out

    def _k2(self, i0, i1):
        sig, N, U = self.signal, self.N, self.lam.size
        if i1 == i0:
            return np.zeros((N, N, U))
        cells = np.arange(i0, i1)
        dx_as = sig.increment_idx(cells, i0)  # (c, N)
        m = self._m[i0:i1]
        c0 = sig.area_idx(cells, i0)
        c1 = m[:, :, None] * dx_as[:, None, :]
        if self._has_drift:
            c1 = c1 + self._drift[i0:i1] / self._h[i0:i1, None, None]
        c2 = 0.5 * m[:, :, None] * m[:, None, :]
        corr = self._poly_correction(i0, i1, [c0, c1, c2])
        return sig.area_idx(i1, i0)[..., None] - corr

    def _k3(self, i0, i1):
        sig, N, U = self.signal, self.N, self.lam.size
        if not sig.has_level3:
            raise ValueError("level-3 operators need a level-3 lift")
        if i1 == i0:
            return np.zeros((N, N, N, U))
        cells = np.arange(i0, i1)
        dx_as = sig.increment_idx(cells, i0)
        a_as = sig.area_idx(cells, i0)
        m = self._m[i0:i1]
        mm = m[:, :, None] * m[:, None, :]
        c0 = sig.triple_idx(cells, i0)
        c1 = m[:, :, None, None] * a_as[:, None, :, :]
        if self._has_drift:
            c1 = c1 + (self._drift[i0:i1] / self._h[i0:i1, None, None])[..., None] * dx_as[:, None, None, :]
        c2 = 0.5 * mm[..., None] * dx_as[:, None, None, :]
        c3 = mm[..., None] * m[:, None, None, :] / 6.0
        corr = self._poly_correction(i0, i1, [c0, c1, c2, c3])
        return sig.triple_idx(i1, i0)[..., None] - corr

    def multiplier(self, level: int, s: float, t: float) -> np.ndarray:
        """Kernels expanded onto the FFT layout: shape ``(N,)*level + grid.shape``."""
        return self.grid.expand(self.kernel(level, s, t))

    # operators -------------------------------------------------------------

    def _apply(self, mult_u: np.ndarray, phi: GridFunction) -> GridFunction:
        if phi.grid != self.grid:
            raise ValueError("field lives on a different spectral grid")
        return phi.with_multiplier(self.grid.expand(mult_u))

    def xx_op(self, s, t, i, phi):
        """``X^{x,i}_ts(phi)``."""
        self._check_component(i)
        return self._apply(self.kernel(1, s, t)[i], phi)

    def xax_op(self, s, t, i, phi):
        """``X^{ax,i}_ts(phi) = X^{x,i}_ts(phi) - dx^i_ts phi``."""
        self._check_component(i)
        dx = self.signal.increment(s, t)[i]
        return self._apply(self.kernel(1, s, t)[i] - dx, phi)

    def xxx2_op(self, s, t, i, j, phi):
        """``X^{xx,ij}_ts(phi)``."""
        self._check_component(i, j)
        return self._apply(self.kernel(2, s, t)[i, j], phi)

    def xaxx_op(self, s, t, i, j, phi):
        """``X^{axx,ij}_ts(phi) = X^{xx,ij}_ts(phi) - x2[i,j]_ts phi``."""
        self._check_component(i, j)
        a = self.signal.area(s, t)[i, j]
        return self._apply(self.kernel(2, s, t)[i, j] - a, phi)

    def xxx3_op(self, s, t, a, b, c, phi):
        """``X^{xxx,abc}_ts(phi)``."""
        self._check_component(a, b, c)
        return self._apply(self.kernel(3, s, t)[a, b, c], phi)

    def xx_nodes(self, t: float, nodes: np.ndarray) -> np.ndarray:
        """Level-1 kernels ``X^x_{t, u}`` for fine-grid node indices ``nodes`` (all <= t); shape (L, N, U)."""
        i1 = self.time_grid.index_of(t)
        nodes = np.asarray(nodes)
        i0 = int(nodes.min())
        decay, z = self._decay(i0, i1)
        w = decay * phi1(z)
        per_cell = self._d[i0:i1, :, None] * w[:, None, :]  # (cells, N, U)
        # suffix sums: chi(u_l, t) = sum_{j >= l} per_cell[j]
        suffix = np.zeros((i1 - i0 + 1,) + per_cell.shape[1:])
        suffix[:-1] = np.cumsum(per_cell[::-1], axis=0)[::-1]
        return suffix[nodes - i0]

    def xxa_op(self, s, t, i, phi, psi, nodes: int | None = None, chunk: int | None = None):
        """``X^{xa,i}_ts(phi, psi)`` by the composite trapezoid rule.

        Nodes are the fine-grid points of ``[s, t]``; ``nodes`` selects an
        evenly strided subset of that many points (the stride must divide
        the number of fine cells).
        """
        self._check_component(i)
        if phi.grid != self.grid or psi.grid != self.grid:
            raise ValueError("fields live on a different spectral grid")
        i0, i1 = self._idx(s, t)
        span = i1 - i0
        if span == 0:
            return GridFunction.zeros(self.grid)
        stride = 1
        if nodes is not None:
            if nodes < 2:
                raise ValueError("trapezoid rule needs at least two nodes")
            if span % (nodes - 1):
                raise ValueError(f"{nodes} nodes do not subdivide {span} fine cells evenly")
            stride = span // (nodes - 1)
        idx = np.arange(i0, i1 + 1, stride)
        u = self._t[idx]
        w = np.zeros(idx.size)
        du = np.diff(u)
        w[:-1] += du / 2
        w[1:] += du / 2
        chi = self.xx_nodes(t, idx)[:, i, :]  # (L, U)
        g = self.grid
        lam_full = g.eigenvalues
        psi_v = psi.values
        chunk = chunk or max(1, (1 << 20) // g.size)
        acc = np.zeros(g.shape, dtype=complex)
        for c0 in range(0, idx.size, chunk):
            sl = slice(c0, c0 + chunk)
            tau = (u[sl] - u[0]).reshape((-1,) + (1,) * g.n)
            a_s_phi = phi.coeffs * (-lam_full * np.exp(-lam_full * tau))
            prod = g.ifft(a_s_phi)
            if phi.real:
                prod = prod.real
            prod = g.fft(prod * psi_v)
            mult = g.expand(chi[sl])
            acc += np.tensordot(w[sl], mult * prod, axes=1)
        return GridFunction(g, acc, real=phi.real and psi.real)

    # audits ----------------------------------------------------------------

    def relation_audit(
        self,
        triples,
        phi: GridFunction,
        psi: GridFunction | None = None,
        eps: float = 0.1,
        include_xa: bool = False,
    ) -> RelationReport:
        """Maximum relative residuals of the algebraic relations over grid-index triples ``(s, u, t)``."""
        pts = self._t
        N = self.N
        r_x = r_ax = r_xx = r_xa = 0.0
        r_xxx = 0.0 if self.signal.has_level3 else None
        r_eps = 0.0

        def rel(res, *terms):
            scale = max([x.norm() for x in terms] + [1e-300])
            return res.norm() / scale

        for si, ui, ti in triples:
            s, u, t = pts[si], pts[ui], pts[ti]
            S_tu = lambda v: apply_heat(v, t - u)
            dx_us = self.signal.increment(s, u)
            a2_us = self.signal.area(s, u)
            for i in range(N):
                X_ts, X_tu, X_us = self.xx_op(s, t, i, phi), self.xx_op(u, t, i, phi), self.xx_op(s, u, i, phi)
                r_x = max(r_x, rel(X_ts - X_tu - S_tu(X_us), X_ts, X_tu, X_us))
                dx = self.signal.increment(s, t)[i]
                r_ax = max(r_ax, rel(X_ts - self.xax_op(s, t, i, phi) - phi * dx, X_ts))
                lhs = S_tu(self.xx_op(s, t, i, apply_heat(phi, eps)))
                rhs = apply_heat(apply_heat(self.xx_op(s, t, i, phi), t - u), eps)
                r_eps = max(r_eps, rel(lhs - rhs, lhs))
                for j in range(N):
                    Y_ts, Y_tu, Y_us = (self.xxx2_op(a, b, i, j, phi) for a, b in ((s, t), (u, t), (s, u)))
                    res = Y_ts - Y_tu - S_tu(Y_us) - X_tu * dx_us[j]
                    r_xx = max(r_xx, rel(res, Y_ts, Y_tu, Y_us))
                    if r_xxx is not None:
                        XX_tu = self.xxx2_op(u, t, i, j, phi)
                        for k in range(N):
                            Z_ts, Z_tu, Z_us = (self.xxx3_op(a, b, i, j, k, phi) for a, b in ((s, t), (u, t), (s, u)))
                            res = Z_ts - Z_tu - S_tu(Z_us) - X_tu * a2_us[j, k] - XX_tu * dx_us[k]
                            r_xxx = max(r_xxx, rel(res, Z_ts, Z_tu, Z_us))
                if include_xa:
                    if psi is None:
                        raise ValueError("the X^xa audit needs a second field psi")
                    r_xa = max(r_xa, self.xa_residual(s, u, t, i, phi, psi))
        return RelationReport(
            delta_hat_xx=r_x,
            decomposition_ax=r_ax,
            delta_hat_xxx2=r_xx,
            delta_hat_xxx3=r_xxx,
            delta_hat_xxa=r_xa if include_xa else None,
            s_eps_commutation=r_eps,
            triples=len(triples),
        )

    def xa_residual(self, s, u, t, i, phi, psi) -> float:
        """Relative residual of ``dhat X^xa_tus = X^xa_tu(a_us phi, psi) + X^x_tu(a_us phi . psi)``."""
        from .semigroup import apply_a

        a_phi = apply_a(phi, u - s)
        W_ts = self.xxa_op(s, t, i, phi, psi)
        W_tu = self.xxa_op(u, t, i, phi, psi)
        W_us = self.xxa_op(s, u, i, phi, psi)
        lhs = W_ts - W_tu - apply_heat(W_us, t - u)
        rhs = self.xxa_op(u, t, i, a_phi, psi) + self.xx_op(u, t, i, a_phi * psi)
        return (lhs - rhs).norm() / max(W_ts.norm(), W_tu.norm(), W_us.norm(), 1e-300)
