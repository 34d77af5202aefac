"""Command-line front end: configuration, exit codes, determinism."""

import csv
import json
import math

import numpy as np
import pytest

from rheat import cli
from rheat.semigroup import GridFunction, SpectralGrid, apply_heat, load_grid_function

SMALL = ["--override", "signal.fine_exponent=7", "--override", "grid.K=16", "--override", "grid.P=64"]


def run(tmp_path, *args):
    return cli.main(list(args) + ["--out", str(tmp_path)])


def rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def footer_order(path):
    last = path.read_text().splitlines()[-1]
    assert last.startswith("# fitted_order=")
    return float(last.split("=", 1)[1])


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# comment\nsignal.hurst = 0.3\nsolver.scheme = rough3  # trailing\nsolver.include_xa = no\n")
    args = cli.build_parser().parse_args(["solve", "--config", str(cfg), "--override", "grid.K=8", "--seed", "4"])
    c = cli.load_config(args)
    assert c.signal.hurst == 0.3 and c.solver.scheme == "rough3" and c.solver.include_xa is False
    assert c.grid.K == 8 and c.signal.seed == 4


@pytest.mark.parametrize("bad", [["--override", "nope.key=1"], ["--override", "signal.hurst=x"],
                                 ["--override", "signal.hurst=1.5"], ["--override", "solver.scheme=rk4"],
                                 ["--override", "grid.P=100"], ["--override", "noequals"],
                                 ["--config", "/nonexistent.cfg"], ["--seed", "-1"]])
def test_bad_configuration_exits_2(tmp_path, bad):
    assert run(tmp_path, "audit", *bad) == 2


def test_unknown_command_exits_2(tmp_path):
    assert run(tmp_path, "frobnicate") == 2


def test_audit_builtin_linear(tmp_path):
    code = run(tmp_path, "audit", "--override", "signal.kind=builtin", "--override", "signal.builtin=linear",
               "--override", "signal.fine_exponent=8")
    assert code == 0
    data = json.loads((tmp_path / "audit.json").read_text())
    assert data["passed"] and data["version"] == cli.__version__
    for c in data["checks"]:
        if c["name"].startswith(("convrp", "cochain")):
            assert c["residual"] <= 1e-10


def test_audit_fbm_seed_7_chen(tmp_path):
    assert run(tmp_path, "audit", "--seed", "7", "--override", "signal.fine_exponent=9") == 0
    checks = {c["name"]: c for c in json.loads((tmp_path / "audit.json").read_text())["checks"]}
    assert checks["chen.level2"]["residual"] <= 1e-12 and checks["chen.level3"]["residual"] <= 1e-12


def test_corrupted_signal_file_exits_2(tmp_path):
    assert run(tmp_path, "sample", *SMALL) == 0
    raw = (tmp_path / "signal.rhsg").read_bytes()
    bad = tmp_path / "bad.rhsg"
    bad.write_bytes(raw[:-9])
    assert run(tmp_path, "audit", "--override", "signal.kind=file", "--override", f"signal.path={bad}") == 2


def test_sample_is_deterministic_and_loadable(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "sample", "--seed", "3", *SMALL) == 0
    assert run(b, "sample", "--seed", "3", *SMALL) == 0
    assert (a / "signal.rhsg").read_bytes() == (b / "signal.rhsg").read_bytes()
    assert (a / "sample.json").read_bytes() == (b / "sample.json").read_bytes()
    assert run(a, "audit", "--override", "signal.kind=file", "--override",
               f"signal.path={a / 'signal.rhsg'}", "--override", "grid.K=8", "--override", "grid.P=32") == 0


def test_convergence_smooth_linear_oracle(tmp_path):
    code = run(tmp_path, "convergence", "--override", "signal.kind=builtin", "--override", "field.name=linear",
               "--override", "field.c=6,3", "--override", "solver.scheme=rough2", "--override",
               "convergence.min_exponent=4", "--override", "convergence.max_exponent=8")
    assert code == 0
    table = rows(tmp_path / "convergence.csv")
    assert [int(r["mesh_exponent"]) for r in table] == [4, 5, 6, 7, 8]
    assert all(r["status"] == "ok" for r in table)
    assert footer_order(tmp_path / "convergence.csv") >= 1.5


def test_convergence_young_self_convergence(tmp_path):
    code = run(tmp_path, "convergence", "--override", "signal.hurst=0.75", "--override", "signal.level=2",
               "--override", "solver.scheme=young_euler", "--override", "convergence.reference=finest",
               "--override", "convergence.min_exponent=3", "--override", "convergence.max_exponent=8",
               "--override", "grid.K=16", "--override", "grid.P=64")
    assert code == 0
    assert footer_order(tmp_path / "convergence.csv") >= 0.4


def test_convergence_zero_field(tmp_path):
    assert run(tmp_path, "convergence", "--override", "field.name=zero", *SMALL, "--override",
               "convergence.max_exponent=6") == 0
    assert all(float(r["sup_error"]) <= 1e-13 for r in rows(tmp_path / "convergence.csv"))


def test_convergence_blowup_row(tmp_path):
    assert run(tmp_path, "convergence", "--override", "signal.kind=builtin", "--override", "field.name=linear",
               "--override", "field.c=12", "--override", "solver.scheme=young_euler", "--override",
               "solver.ceiling_factor=2", *SMALL, "--override", "convergence.max_exponent=5") == 0
    table = rows(tmp_path / "convergence.csv")
    assert any(r["status"] == "blowup" and math.isnan(float(r["sup_error"])) for r in table)


def test_convergence_threads_do_not_change_output(tmp_path, monkeypatch):
    args = ["convergence", "--override", "convergence.seeds=3", "--override", "convergence.reference=finest",
            *SMALL, "--override", "convergence.max_exponent=5", "--override", "solver.scheme=young_euler"]
    monkeypatch.setenv("RHEAT_THREADS", "1")
    assert run(tmp_path / "one", *args) == 0
    monkeypatch.setenv("RHEAT_THREADS", "3")
    assert run(tmp_path / "three", *args) == 0
    assert (tmp_path / "one" / "convergence.csv").read_bytes() == (tmp_path / "three" / "convergence.csv").read_bytes()


def test_oracle_additive_cases(tmp_path):
    assert run(tmp_path, "oracle", "--override", "signal.kind=builtin", *SMALL, "--override", "solver.steps=16") == 0
    res = json.loads((tmp_path / "oracle.json").read_text())["results"]
    additive = [r for r in res if r["case"].startswith("additive/")]
    assert len(additive) == 4 and max(r["error"] for r in additive) <= 1e-10


def test_solve_zero_noise_snapshots_are_heat_flow(tmp_path):
    code = run(tmp_path, "solve", "--override", "signal.kind=builtin", "--override", "signal.builtin=zero",
               *SMALL, "--override", "solver.steps=16", "--override", "solver.snapshot_stride=4")
    assert code == 0
    grid = SpectralGrid(1, 16, 64)
    psi = GridFunction.from_function(grid, np.cos)
    for k in (0, 4, 8, 12, 16):
        snap = load_grid_function(tmp_path / "snapshots" / f"y_{k:06d}.rhgf")
        assert snap.max_abs_diff(apply_heat(psi, k / 16)) <= 1e-13
    data = json.loads((tmp_path / "solve.json").read_text())
    assert data["config"]["solver.steps"] == 16 and data["version"] == cli.__version__


def test_solve_blowup_exits_1(tmp_path):
    assert run(tmp_path, "solve", "--override", "signal.kind=builtin", "--override", "field.name=linear",
               "--override", "field.c=12", "--override", "solver.ceiling_factor=2", *SMALL,
               "--override", "solver.steps=16") == 1


@pytest.mark.parametrize("command", ["audit", "solve", "oracle"])
def test_outputs_are_byte_identical(tmp_path, command):
    args = [command, "--seed", "5", *SMALL, "--override", "solver.steps=16"]
    assert run(tmp_path / "a", *args) == run(tmp_path / "b", *args)
    for f in (tmp_path / "a").glob("*.json"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
