"""Driving paths, fBm sampling, polyline lifts, Chen relations and signal files."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rheat.algebra import TimeGrid
from rheat.signal import (
    DrivingPath,
    SignalFormatError,
    builtin_path,
    chen_residuals,
    fgn_autocovariance,
    lift,
    lift_pl_level2,
    lift_pl_level3,
    load_signal,
    path_from_function,
    sample_fbm,
    save_signal,
    signal_bytes,
)

paths = st.integers(1, 3).flatmap(
    lambda N: arrays(float, (9, N), elements=st.floats(-10, 10, allow_nan=False))
)


def area_oracle(x, i0, i1):
    """x2[i,j] by the midpoint rule on each linear cell (exact for polylines)."""
    out = np.zeros((x.shape[1], x.shape[1]))
    for k in range(i0, i1):
        d = x[k + 1] - x[k]
        out += np.outer(d, 0.5 * (x[k] + x[k + 1]) - x[i0])
    return out


def triple_oracle(x, i0, i1):
    """x3[a,b,c] = int dx^a x2[b,c]_{r s} by Simpson's rule per cell (x2 is quadratic there)."""
    N = x.shape[1]
    out = np.zeros((N, N, N))
    A = np.zeros((N, N))
    for k in range(i0, i1):
        d = x[k + 1] - x[k]
        Am = A + np.outer(d / 2, x[k] - x[i0]) + np.outer(d / 2, d / 2) / 2
        Ar = A + np.outer(d, x[k] - x[i0]) + np.outer(d, d) / 2
        out += np.einsum("a,bc->abc", d, (A + 4 * Am + Ar) / 6)
        A = Ar
    return out


def test_path_is_pinned_at_zero():
    g = TimeGrid.uniform(1.0, 4)
    p = DrivingPath(g, np.arange(5.0) + 3)
    assert p.values[0, 0] == 0.0 and p.N == 1


def test_path_rejects_nonfinite():
    with pytest.raises(ValueError):
        DrivingPath(TimeGrid.uniform(1.0, 2), [0.0, np.nan, 1.0])


def test_fgn_autocovariance_of_brownian_motion():
    r = fgn_autocovariance(0.5, 5)
    assert np.allclose(r, [1, 0, 0, 0, 0])


def test_fbm_brownian_variance():
    g = TimeGrid.uniform(1.0, 16)
    x1 = np.array([sample_fbm(0.5, 1, g, s).values[-1, 0] for s in range(10_000)])
    assert abs(x1.var() - 1.0) < 0.05


def test_fbm_same_seed_is_bit_identical():
    g = TimeGrid.uniform(1.0, 256)
    a, b = sample_fbm(0.3, 2, g, 11), sample_fbm(0.3, 2, g, 11)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, sample_fbm(0.3, 2, g, 12).values)


@pytest.mark.parametrize("H", [0.3, 0.75])
def test_fbm_variogram_slope(H):
    g = TimeGrid.uniform(1.0, 256)
    lags = 2 ** np.arange(0, 7)
    v = np.zeros(lags.size)
    seeds = 200
    for s in range(seeds):
        x = sample_fbm(H, 1, g, s).values[:, 0]
        v += [np.mean((x[l:] - x[:-l]) ** 2) for l in lags]
    slope = np.polyfit(np.log(lags / 256), np.log(v / seeds), 1)[0]
    assert abs(slope - 2 * H) < 0.1


def test_fbm_cholesky_and_embedding_agree_in_law():
    # small grids use Cholesky; compare the variance of x_1 with a larger grid
    small = [sample_fbm(0.7, 1, TimeGrid.uniform(1.0, 8), s).values[-1, 0] for s in range(4000)]
    big = [sample_fbm(0.7, 1, TimeGrid.uniform(1.0, 64), s).values[-1, 0] for s in range(4000)]
    assert abs(np.var(small) - 1) < 0.08 and abs(np.var(big) - 1) < 0.08


def test_fbm_argument_checks():
    g = TimeGrid.uniform(1.0, 8)
    with pytest.raises(ValueError):
        sample_fbm(1.0, 1, g, 0)
    with pytest.raises(ValueError):
        sample_fbm(0.5, 1, TimeGrid(np.array([0.0, 0.1, 1.0])), 0)


def test_linear_diagonal_path_area():
    g = TimeGrid.uniform(1.0, 8)
    sig = lift(path_from_function(g, lambda t: np.stack([t, t], axis=1)))
    assert np.allclose(sig.area(0.0, 1.0), 0.5)
    assert np.allclose(sig.increment(0.5, 0.5), 0) and np.allclose(sig.area(0.5, 0.5), 0)


def test_scalar_path_has_no_levy_area(rng):
    sig = lift(DrivingPath(TimeGrid.uniform(1.0, 32), rng.standard_normal(33)))
    A = sig.area(0.25, 0.875)
    assert np.allclose(A - A.T, 0)


def test_area_matches_midpoint_oracle(rng):
    g = TimeGrid.uniform(1.0, 1024)
    p = DrivingPath(g, np.cumsum(rng.standard_normal((1025, 2)), axis=0) / 32)
    sig = lift_pl_level2(p)
    assert np.max(np.abs(sig.area(0.0, 1.0) - area_oracle(p.values, 0, 1024))) <= 1e-12


def test_triple_matches_simpson_oracle(rng):
    g = TimeGrid.uniform(1.0, 64)
    p = DrivingPath(g, rng.standard_normal((65, 2)))
    sig = lift_pl_level3(p)
    for i0, i1 in [(0, 64), (5, 17), (30, 31)]:
        s, t = g.points[i0], g.points[i1]
        assert np.allclose(sig.triple(s, t), triple_oracle(p.values, i0, i1), atol=1e-11)


def test_linear_scalar_triple():
    sig = lift(builtin_path("linear", TimeGrid.uniform(1.0, 16)))
    assert sig.triple(0.0, 1.0)[0, 0, 0] == pytest.approx(1 / 6)


def test_linear_path_chen_at_midpoint():
    sig = lift(builtin_path("linear", TimeGrid.uniform(1.0, 2)))
    lhs = sig.area(0.0, 1.0) - sig.area(0.5, 1.0) - sig.area(0.0, 0.5)
    rhs = np.outer(sig.increment(0.5, 1.0), sig.increment(0.0, 0.5))
    assert lhs[0, 0] == pytest.approx(0.25) and rhs[0, 0] == pytest.approx(0.25)


@given(paths)
def test_chen_and_shuffle_hold_for_any_polyline(x):
    sig = lift(DrivingPath(TimeGrid.uniform(1.0, 8), x))
    rep = chen_residuals(sig)
    scale = 1 + np.abs(x).max() ** 3
    assert max(rep.level2, rep.level3, rep.shuffle) <= 1e-12 * scale


@given(arrays(float, 9, elements=st.floats(-5, 5, allow_nan=False)))
def test_scalar_triple_is_cube_over_six(x):
    g = TimeGrid.uniform(1.0, 8)
    sig = lift(DrivingPath(g, x))
    for s, t in [(0.0, 1.0), (0.25, 0.625)]:
        d = sig.increment(s, t)[0]
        assert sig.triple(s, t)[0, 0, 0] == pytest.approx(d**3 / 6, abs=1e-12 * (1 + abs(d) ** 3))


def test_area_perturbation_keeps_chen():
    g = TimeGrid.uniform(1.0, 32)
    sig = lift(builtin_path("smooth", g, 2), level=2)
    E = np.array([[0.0, 1.0], [-1.0, 0.0]])
    pert = sig.with_area_perturbation(1e-3, E)
    assert chen_residuals(pert).level2 < 1e-14
    assert pert.area(0.0, 1.0)[0, 1] - sig.area(0.0, 1.0)[0, 1] == pytest.approx(1e-3)
    with pytest.raises(ValueError):
        sig.with_area_perturbation(1e-3, np.eye(2))


def test_restrict_subsamples_skeleton(rng):
    p = DrivingPath(TimeGrid.uniform(1.0, 16), rng.standard_normal((17, 2)))
    sig = lift(p).restrict(4)
    assert sig.grid.cells == 4
    assert np.allclose(sig.increment(0.0, 1.0), lift(p).increment(0.0, 1.0))


def test_signal_file_round_trip(tmp_path):
    sig = lift(sample_fbm(0.4, 2, TimeGrid.uniform(1.0, 64), 7))
    path = tmp_path / "sig.rhsg"
    save_signal(sig, path)
    back = load_signal(path)
    assert signal_bytes(back) == path.read_bytes()
    assert np.array_equal(back.path.values, sig.path.values)
    assert back.path.seed == 7 and back.path.hurst == 0.4
    assert chen_residuals(back, rng=np.random.default_rng(0)) == chen_residuals(sig, rng=np.random.default_rng(0))


def test_truncated_or_corrupted_file_is_rejected(tmp_path):
    sig = lift(sample_fbm(0.4, 1, TimeGrid.uniform(1.0, 16), 1), level=2)
    raw = signal_bytes(sig)
    path = tmp_path / "bad.rhsg"
    path.write_bytes(raw[:-20])
    with pytest.raises(SignalFormatError):
        load_signal(path)
    flipped = bytearray(raw)
    flipped[40] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(SignalFormatError):
        load_signal(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(SignalFormatError):
        load_signal(path)
