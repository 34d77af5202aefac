"""Time stepping, closed-form oracles, remainder audits and Picard iteration."""

import json
import math

import numpy as np
import pytest

from rheat.algebra import TimeGrid
from rheat.convrp import ConvolutionalRoughPath
from rheat.dynamics import (
    BlowUpError,
    SolverConfig,
    additive_field,
    additive_solution,
    commuting_flow_solution,
    controlled_remainder_audit,
    linear_field,
    picard_solve,
    sine_field,
    solve,
    step,
    step_regularized,
    step_rough2,
    step_rough3,
    step_young,
    taylor_audit,
    zero_field,
)
from rheat.semigroup import GridFunction, SpectralGrid, apply_heat
from rheat.signal import builtin_path, lift, sample_fbm

G = SpectralGrid(1, 16, 64)


def fbm_crp(cells=256, H=0.4, N=2, seed=1, level=3, grid=G):
    return ConvolutionalRoughPath(lift(sample_fbm(H, N, TimeGrid.uniform(1.0, cells), seed), level), grid)


def smooth_crp(cells=256, N=2, name="smooth", grid=G, T=1.0):
    return ConvolutionalRoughPath(lift(builtin_path(name, TimeGrid.uniform(T, cells), N)), grid)


def g_fields():
    return [lambda x: np.cos(x), lambda x: 0.5 + np.sin(2 * x)]


def psi0(grid=G):
    return GridFunction.from_function(grid, lambda x: np.cos(x) + 0.3 * np.sin(3 * x))


@pytest.mark.parametrize("scheme,eps", [("young_euler", 0), ("rough2", 0), ("rough2_regularized", 0.05),
                                        ("rough3", 0)])
@pytest.mark.parametrize("steps", [4, 32])
def test_additive_field_telescopes(scheme, eps, steps):
    crp = fbm_crp()
    f = additive_field(g_fields())
    y = solve(SolverConfig(scheme=scheme, steps=steps, eps=eps, audit=False), psi0(), crp, f).final
    g = [GridFunction.from_function(G, fn) for fn in g_fields()]
    if eps:
        g = [apply_heat(v, eps) for v in g]
    ref = additive_solution(psi0(), crp, g, 1.0)
    assert (y - ref).norm(np.inf) <= 1e-10 * ref.norm(np.inf)


def test_rough_steps_reduce_to_young_for_additive_fields():
    crp = fbm_crp(64)
    f = additive_field(g_fields())
    y = psi0()
    a = step_young(y, 0.25, 0.5, crp, f)
    for b in (step_rough2(y, 0.25, 0.5, crp, f), step_rough3(y, 0.25, 0.5, crp, f)):
        assert np.array_equal(a.coeffs, b.coeffs)


def test_zero_noise_is_heat_flow():
    crp = smooth_crp(64, name="zero")
    for scheme in ("young_euler", "rough2", "rough3"):
        y = solve(SolverConfig(scheme=scheme, steps=16), psi0(), crp, sine_field(2)).final
        assert y.max_abs_diff(apply_heat(psi0(), 1.0)) <= 1e-13


def test_zero_field_is_heat_flow_and_has_no_remainder():
    crp = fbm_crp(64)
    rep = solve(SolverConfig(steps=16), psi0(), crp, zero_field(2))
    assert rep.final.max_abs_diff(apply_heat(psi0(), 1.0)) <= 1e-13
    assert max(rep.remainder.y_sharp) <= 1e-13


def test_linear_path_identity_field_keeps_first_mode():
    # y_t = e^t S_t (2 cos) = 2 cos; the Euler step is exact on this mode
    psi = GridFunction.from_function(G, lambda x: 2 * np.cos(x))
    crp = smooth_crp(1024, N=1, name="linear")
    assert commuting_flow_solution(psi, crp, [1.0], 1.0).max_abs_diff(psi) < 1e-14
    for L in (2, 5):
        y = solve(SolverConfig(scheme="young_euler", steps=2**L, audit=False), psi, crp, linear_field([1.0])).final
        assert y.max_abs_diff(psi) < 1e-13


def test_euler_order_one_on_second_mode():
    psi = GridFunction.from_function(G, lambda x: 2 * np.cos(2 * x))
    crp = smooth_crp(1024, N=1, name="linear")
    ref = psi * math.exp(1.0 - 4.0)
    errs = []
    for L in range(4, 9):
        y = solve(SolverConfig(scheme="young_euler", steps=2**L, audit=False), psi, crp, linear_field([1.0])).final
        errs.append(y.max_abs_diff(ref))
    order = -np.polyfit(np.arange(4, 9), np.log2(errs), 1)[0]
    assert abs(order - 1.0) < 0.1


def test_rough2_beats_euler_on_smooth_linear_oracle():
    crp = smooth_crp(1024, grid=SpectralGrid(1, 8, 32))
    psi = psi0(crp.grid)
    c = [1.5, 1.0]
    ref = commuting_flow_solution(psi, crp, c, 1.0)
    errs = {"young_euler": [], "rough2": []}
    for L in (4, 5, 6, 7):
        for scheme in errs:
            y = solve(SolverConfig(scheme=scheme, steps=2**L, audit=False), psi, crp, linear_field(c)).final
            errs[scheme].append((y - ref).norm(np.inf))
    slope = lambda e: -np.polyfit(np.arange(4), np.log2(e), 1)[0]
    assert slope(errs["young_euler"]) >= 0.8
    assert slope(errs["rough2"]) >= 1.5


def test_large_eps_smooths_the_forcing():
    crp = fbm_crp(64)
    y = psi0()
    out = step_regularized(y, 0.0, 0.25, crp, sine_field(2), eps=30.0)
    forcing = out - apply_heat(y, 0.25)
    mean = GridFunction.constant(G, forcing.coeffs[0].real)
    assert (forcing - mean).norm() <= 1e-10


def test_regularized_needs_eps():
    crp = fbm_crp(64)
    with pytest.raises(ValueError):
        step(psi0(), 0.0, 0.5, crp, sine_field(2), "rough2_regularized")
    with pytest.raises(ValueError):
        SolverConfig(scheme="rough2_regularized").validate()


def test_rough3_needs_level_three():
    crp = fbm_crp(64, level=2)
    with pytest.raises(ValueError):
        solve(SolverConfig(scheme="rough3", steps=8), psi0(), crp, sine_field(2))


def test_component_mismatch():
    with pytest.raises(ValueError):
        step_young(psi0(), 0.0, 0.5, fbm_crp(64, N=2), sine_field(3))


def test_config_validation():
    for bad in (dict(scheme="rk4"), dict(steps=0), dict(kappa=1.2), dict(eps=-1.0), dict(picard_cells=0)):
        with pytest.raises(ValueError):
            SolverConfig(**bad).validate()
    with pytest.raises(ValueError):
        solve(SolverConfig(steps=48), psi0(), fbm_crp(64), sine_field(2))


def test_blow_up_is_reported():
    crp = smooth_crp(64, N=1, name="linear")
    cfg = SolverConfig(scheme="young_euler", steps=16, ceiling_factor=10.0)
    with pytest.raises(BlowUpError) as exc:
        solve(cfg, psi0(), crp, linear_field([8.0]))
    assert exc.value.step >= 1 and exc.value.norm > exc.value.ceiling


def test_report_is_deterministic_and_writes_sidecar(tmp_path):
    crp = fbm_crp(64)
    cfg = SolverConfig(steps=16, snapshot_stride=8)
    a = solve(cfg, psi0(), crp, sine_field(2))
    b = solve(cfg, psi0(), crp, sine_field(2))
    assert a.to_json() == b.to_json()
    a.write(tmp_path / "r.json", snapshot_dir=tmp_path / "snaps")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["field"] == "sine" and len(data["l2_norms"]) == 17
    assert "wall" not in (tmp_path / "r.json").read_text()
    assert (tmp_path / "r.walltime.log").exists()
    assert sorted(p.name for p in (tmp_path / "snaps").iterdir()) == ["y_000000.rhgf", "y_000008.rhgf",
                                                                    "y_000016.rhgf"]


def test_controlled_remainder_of_young_solution():
    crp = fbm_crp(1024, H=0.75, level=2)
    rep = solve(SolverConfig(scheme="young_euler", steps=256, kappa=0.7, audit=False), psi0(), crp, sine_field(2))
    audit = controlled_remainder_audit(rep.path, crp, 0.7)
    assert audit.y_sharp_exponent >= 2 * 0.7 * 0.8
    assert audit.target == pytest.approx(1.4)


def test_taylor_remainder_order():
    crp = fbm_crp(1024, H=0.4)
    rep = solve(SolverConfig(scheme="rough2", steps=256, audit=False), psi0(), crp, sine_field(2))
    t2 = taylor_audit(rep.path, crp, 2)
    t3 = taylor_audit(rep.path, crp, 3)
    assert t3["exponent"] > t2["exponent"] > 0.5
    with pytest.raises(ValueError):
        taylor_audit(rep.path, crp, 4)


def test_picard_additive_converges_in_one_iteration():
    crp = fbm_crp(64)
    f = additive_field(g_fields())
    rep = picard_solve((0.0, 0.5), psi0(), crp, f, SolverConfig(picard_cells=8))
    assert rep.iterations == [1]
    g = [GridFunction.from_function(G, fn) for fn in g_fields()]
    assert (rep.final - additive_solution(psi0(), crp, g, 0.5)).norm(np.inf) < 1e-12


def test_picard_bisects_long_intervals():
    crp = smooth_crp(256, T=2.0)
    cfg = SolverConfig(scheme="rough2", picard_cells=8, picard_max_iter=12)
    rep = picard_solve((0.0, 2.0), psi0(), crp, linear_field([6.0, 6.0]), cfg)
    assert rep.bisections >= 1
    assert rep.rejected[0][:2] == (0.0, 2.0)
    assert all(max(f) < 1.0 for f in rep.factors if f)
    assert rep.times[0] == 0.0 and rep.times[-1] == 2.0
