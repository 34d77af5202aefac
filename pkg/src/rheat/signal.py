"""Driving signals: fBm sampling, piecewise-linear lifts and persistence.

Conventions (fixed throughout the package)::

    x2[i, j]_ts    = int_s^t dx^i_u (x^j_u - x^j_s)
    x3[a, b, c]_ts = int_s^t dx^a_u x2[b, c]_us

so the outer (first) index always carries the latest time.  Chen relations:

    x2_ts - x2_tu - x2_us = dx_tu (x) dx_us
    x3_ts - x3_tu - x3_us = dx_tu (x) x2_us + x2_tu (x) dx_us

Lifts are stored as per-cell data plus prefix sums ``x2_{t_k 0}``,
``x3_{t_k 0}``; any pair of fine-grid times is then evaluated in O(1).
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg

from .algebra import TimeGrid

__all__ = [
    "DrivingPath",
    "RoughSignal",
    "sample_fbm",
    "fgn_autocovariance",
    "path_from_function",
    "builtin_path",
    "lift_pl_level2",
    "lift_pl_level3",
    "lift",
    "chen_residuals",
    "save_signal",
    "load_signal",
    "signal_bytes",
    "SignalFormatError",
    "BUILTIN_PATHS",
]

GENERATOR_ID = "rheat-fbm-dh/1"
_MAGIC = b"RHSG"
_VERSION = 1


@dataclass(frozen=True, eq=False)
class DrivingPath:
    """Samples ``x_{t_k}`` in R^N on a fine grid, with provenance metadata."""

    grid: TimeGrid
    values: np.ndarray
    hurst: float = float("nan")
    seed: int = -1
    generator: str = "builtin"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != len(self.grid):
            raise ValueError(f"{v.shape[0]} samples for a grid of {len(self.grid)} points")
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")
        v = v - v[0]
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.shape[1]


def fgn_autocovariance(H: float, n: int) -> np.ndarray:
    """Autocovariance ``r(k)``, k = 0..n-1, of unit-step fractional Gaussian noise."""
    k = np.arange(n, dtype=float)
    return 0.5 * (np.abs(k + 1) ** (2 * H) - 2 * k ** (2 * H) + np.abs(k - 1) ** (2 * H))


def _fgn_davies_harte(H: float, M: int, rng) -> np.ndarray | None:
    r = fgn_autocovariance(H, M + 1)
    row = np.concatenate([r, r[-2:0:-1]])
    eig = np.fft.fft(row).real
    if eig.min() < -1e-10 * eig.max():
        return None
    m = row.size
    z = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    w = np.fft.fft(np.sqrt(np.clip(eig, 0.0, None) / m) * z)
    return w.real[:M]


def _fgn_cholesky(H: float, M: int, rng) -> np.ndarray:
    r = fgn_autocovariance(H, M)
    C = scipy.linalg.toeplitz(r)
    L = np.linalg.cholesky(C + 1e-14 * np.eye(M))
    return L @ rng.standard_normal(M)


def sample_fbm(H: float, N: int, grid: TimeGrid, seed: int, cholesky_below: int = 16) -> DrivingPath:
    """N independent fBm components on a uniform grid.

    Davies-Harte circulant embedding of fractional Gaussian noise; Cholesky is
    used for grids with fewer than ``cholesky_below`` cells or if the embedding
    fails to be nonnegative definite.  Deterministic in ``(seed, grid, H, N)``.
    """
    if not 0.0 < H < 1.0:
        raise ValueError(f"Hurst index must lie in (0, 1), got {H}")
    if N < 1:
        raise ValueError("need at least one component")
    if not grid.is_uniform:
        raise ValueError("fBm sampling needs a uniform grid")
    M = grid.cells
    h = grid.points[1] - grid.points[0]
    rng = np.random.default_rng(seed)
    out = np.zeros((M + 1, N))
    for i in range(N):
        inc = None if M < cholesky_below else _fgn_davies_harte(H, M, rng)
        if inc is None:
            inc = _fgn_cholesky(H, M, rng)
        out[1:, i] = np.cumsum(inc) * h**H
    return DrivingPath(grid, out, hurst=H, seed=seed, generator=GENERATOR_ID)


def path_from_function(grid: TimeGrid, fn: Callable[[np.ndarray], np.ndarray], name: str = "builtin") -> DrivingPath:
    """Sample ``fn(t)`` (shape ``(len(t),)`` or ``(len(t), N)``) on the grid."""
    return DrivingPath(grid, np.asarray(fn(grid.points), dtype=float), generator=name)


BUILTIN_PATHS = {
    # component i of each builtin; x_0 = 0 is enforced by DrivingPath
    "linear": lambda t, i: t,
    "smooth": lambda t, i: np.sin(t) if i % 2 == 0 else 1.0 - np.cos(t),
    "zero": lambda t, i: np.zeros_like(t),
}


def builtin_path(name: str, grid: TimeGrid, N: int = 1) -> DrivingPath:
    if name not in BUILTIN_PATHS:
        raise ValueError(f"unknown builtin path {name!r}; choose from {sorted(BUILTIN_PATHS)}")
    fn = BUILTIN_PATHS[name]
    vals = np.stack([fn(grid.points, i) for i in range(N)], axis=1)
    return DrivingPath(grid, vals, generator=f"builtin:{name}")


@dataclass(eq=False)
class RoughSignal:
    """A driving path with its level-2 (and optionally level-3) lift.

    ``cell_areas[j]`` is ``x2`` over fine cell j and ``cell_triples[j]`` is ``x3``.
    For the piecewise-linear lift these are ``d(x)d/2`` and ``d(x)d(x)d/6``.
    ``area_drift`` records any Chen-preserving perturbation added to the
    polyline areas; kernels treat it as accruing linearly within each cell.
    """

    path: DrivingPath
    cell_areas: np.ndarray
    cell_triples: np.ndarray | None = None
    _x2: np.ndarray = field(init=False, repr=False)
    _x3: np.ndarray | None = field(init=False, repr=False, default=None)

    def __post_init__(self):
        x = self.path.values
        M, N = self.grid.cells, self.N
        A = np.asarray(self.cell_areas, dtype=float)
        if A.shape != (M, N, N):
            raise ValueError(f"cell areas have shape {A.shape}, expected {(M, N, N)}")
        d = np.diff(x, axis=0)
        x2 = np.zeros((M + 1, N, N))
        # x2_{k+1,0} = x2_{k,0} + A_k + d_k (x) x_k
        x2[1:] = np.cumsum(A + d[:, :, None] * x[:-1, None, :], axis=0)
        self.cell_areas = A
        self._x2 = x2
        if self.cell_triples is not None:
            T = np.asarray(self.cell_triples, dtype=float)
            if T.shape != (M, N, N, N):
                raise ValueError(f"cell triples have shape {T.shape}, expected {(M, N, N, N)}")
            inc = T + d[:, :, None, None] * x2[:-1, None, :, :] + A[:, :, :, None] * x[:-1, None, None, :]
            x3 = np.zeros((M + 1, N, N, N))
            x3[1:] = np.cumsum(inc, axis=0)
            self.cell_triples = T
            self._x3 = x3

    @property
    def grid(self) -> TimeGrid:
        return self.path.grid

    @property
    def N(self) -> int:
        return self.path.N

    @property
    def has_level3(self) -> bool:
        return self.cell_triples is not None

    @property
    def cell_increments(self) -> np.ndarray:
        return np.diff(self.path.values, axis=0)

    @property
    def area_drift(self) -> np.ndarray:
        d = self.cell_increments
        return self.cell_areas - 0.5 * d[:, :, None] * d[:, None, :]

    def _pair(self, s, t) -> tuple[int, int]:
        i, j = self.grid.index_of(s), self.grid.index_of(t)
        if i > j:
            raise ValueError(f"need s <= t, got s={s}, t={t}")
        return i, j

    # index-based accessors (vectorizable over arrays of indices)
    def increment_idx(self, j, i):
        x = self.path.values
        return x[j] - x[i]

    def area_idx(self, j, i):
        x, x2 = self.path.values, self._x2
        return x2[j] - x2[i] - (x[j] - x[i])[..., :, None] * x[i][..., None, :]

    def triple_idx(self, j, i):
        if self._x3 is None:
            raise ValueError("signal has no level-3 lift")
        x, x2, x3 = self.path.values, self._x2, self._x3
        dx = x[j] - x[i]
        a = self.area_idx(j, i)
        return (
            x3[j]
            - x3[i]
            - dx[..., :, None, None] * x2[i][..., None, :, :]
            - a[..., :, :, None] * x[i][..., None, None, :]
        )

    def increment(self, s: float, t: float) -> np.ndarray:
        i, j = self._pair(s, t)
        return self.increment_idx(j, i)

    def area(self, s: float, t: float) -> np.ndarray:
        i, j = self._pair(s, t)
        return self.area_idx(j, i)

    def area_transposed(self, s: float, t: float) -> np.ndarray:
        """The opposite index order ``int dx^j (dx^i)``, for readers of the other convention."""
        return self.area(s, t).T

    def triple(self, s: float, t: float) -> np.ndarray:
        i, j = self._pair(s, t)
        return self.triple_idx(j, i)

    def with_area_perturbation(self, delta: float, E: np.ndarray) -> RoughSignal:
        """Add ``delta * h_j * E`` to every cell area (E antisymmetric, so Chen and shuffle-antisymmetry survive).

        The perturbed signal carries no level-3 lift.
        """
        E = np.asarray(E, dtype=float)
        if not np.allclose(E, -E.T):
            raise ValueError("perturbation direction must be antisymmetric")
        h = np.diff(self.grid.points)
        return RoughSignal(self.path, self.cell_areas + delta * h[:, None, None] * E, None)

    def restrict(self, stride: int) -> RoughSignal:
        """The polyline lift of the subsampled skeleton (coarser fine mesh)."""
        sub = self.grid.subgrid(stride)
        p = DrivingPath(sub, self.path.values[::stride], self.path.hurst, self.path.seed, self.path.generator)
        return lift(p, level=3 if self.has_level3 else 2)


def lift_pl_level2(path: DrivingPath) -> RoughSignal:
    """Piecewise-linear (Wong-Zakai) level-2 lift."""
    if path.grid.cells < 1:
        raise ValueError("degenerate grid")
    d = np.diff(path.values, axis=0)
    return RoughSignal(path, 0.5 * d[:, :, None] * d[:, None, :])


def lift_pl_level3(path: DrivingPath) -> RoughSignal:
    """Piecewise-linear lift with level-3 cell tensors ``d(x)d(x)d/6``."""
    if path.grid.cells < 1:
        raise ValueError("degenerate grid")
    d = np.diff(path.values, axis=0)
    A = 0.5 * d[:, :, None] * d[:, None, :]
    T = d[:, :, None, None] * d[:, None, :, None] * d[:, None, None, :] / 6.0
    return RoughSignal(path, A, T)


def lift(path: DrivingPath, level: int = 3) -> RoughSignal:
    if level == 2:
        return lift_pl_level2(path)
    if level == 3:
        return lift_pl_level3(path)
    raise ValueError(f"lift level must be 2 or 3, got {level}")


@dataclass
class ChenReport:
    level2: float
    level3: float
    shuffle: float
    triples: int

    def passed(self, tol: float = 1e-12) -> bool:
        return max(self.level2, self.level3, self.shuffle) <= tol


def chen_residuals(sig: RoughSignal, n_random: int = 10_000, rng=None, exhaustive_below: int = 64) -> ChenReport:
    """Max absolute Chen residuals over all triples (small grids) or random triples."""
    M = sig.grid.cells
    if M <= exhaustive_below:
        idx = np.array([(s, u, t) for s in range(M + 1) for u in range(s, M + 1) for t in range(u, M + 1)])
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = np.sort(rng.integers(0, M + 1, size=(n_random, 3)), axis=1)
    s, u, t = idx[:, 0], idx[:, 1], idx[:, 2]
    dtu, dus, dts = sig.increment_idx(t, u), sig.increment_idx(u, s), sig.increment_idx(t, s)
    a_ts, a_tu, a_us = sig.area_idx(t, s), sig.area_idx(t, u), sig.area_idx(u, s)
    r2 = a_ts - a_tu - a_us - dtu[:, :, None] * dus[:, None, :]
    sh = a_ts + np.swapaxes(a_ts, 1, 2) - dts[:, :, None] * dts[:, None, :]
    r3 = 0.0
    if sig.has_level3:
        res = (
            sig.triple_idx(t, s)
            - sig.triple_idx(t, u)
            - sig.triple_idx(u, s)
            - dtu[:, :, None, None] * a_us[:, None, :, :]
            - a_tu[:, :, :, None] * dus[:, None, None, :]
        )
        r3 = float(np.abs(res).max())
    return ChenReport(float(np.abs(r2).max()), r3, float(np.abs(sh).max()), len(idx))


class SignalFormatError(ValueError):
    pass


def signal_bytes(sig: RoughSignal) -> bytes:
    """Serialize a signal (little-endian).

    Layout: ``b"RHSG"``, u32 version, u32 N, u32 M, f64 H, i64 seed,
    u32 len + utf-8 generator id, u8 has-level-3, then float64 arrays:
    times (M+1), values (M+1, N), cell increments (M, N), cell areas
    (M, N, N), [cell triples (M, N, N, N)]; finally a u32 CRC32 of all
    preceding bytes.
    """
    p = sig.path
    gen = p.generator.encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IIIdq", _VERSION, sig.N, sig.grid.cells, p.hurst, p.seed))
    buf.write(struct.pack("<I", len(gen)))
    buf.write(gen)
    buf.write(struct.pack("<B", int(sig.has_level3)))
    arrays = [sig.grid.points, p.values, sig.cell_increments, sig.cell_areas]
    if sig.has_level3:
        arrays.append(sig.cell_triples)
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_signal(sig: RoughSignal, path) -> None:
    Path(path).write_bytes(signal_bytes(sig))


def load_signal(path) -> RoughSignal:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != _MAGIC:
        raise SignalFormatError("not a signal file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise SignalFormatError("checksum mismatch (file truncated or corrupted)")
    off = 4
    version, N, M, H, seed = struct.unpack_from("<IIIdq", body, off)
    if version != _VERSION:
        raise SignalFormatError(f"unsupported signal format version {version}")
    off += struct.calcsize("<IIIdq")
    (glen,) = struct.unpack_from("<I", body, off)
    off += 4
    gen = body[off : off + glen].decode()
    off += glen
    (has3,) = struct.unpack_from("<B", body, off)
    off += 1

    def take(shape):
        nonlocal off
        count = math.prod(shape)
        a = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        return a.astype(float)

    times = take((M + 1,))
    values = take((M + 1, N))
    take((M, N))  # increments are redundant with values; kept for external readers
    areas = take((M, N, N))
    triples = take((M, N, N, N)) if has3 else None
    level = int(round(math.log2(M))) if M & (M - 1) == 0 else None
    grid = TimeGrid(times, level)
    path = DrivingPath(grid, values, hurst=H, seed=seed, generator=gen)
    return RoughSignal(path, areas, triples)
