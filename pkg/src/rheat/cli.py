"""Batch front door: ``rheat {audit,convergence,oracle,solve,sample}``.

Configuration is a flat text file of ``section.key = value`` lines (``#``
starts a comment) plus repeatable ``--override KEY=VALUE`` flags.  Unknown
keys are errors.  Every output embeds the effective configuration and the
package version; timings go only to ``*.walltime.log`` sidecars, so outputs
are byte-identical for identical inputs.

Exit codes: 0 pass, 1 failed check, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np

from . import __version__
from .algebra import TimeGrid, cochain_identity_residuals
from .convrp import ConvolutionalRoughPath
from .dynamics import (
    BlowUpError,
    SolverConfig,
    additive_solution,
    builtin_field,
    commuting_flow_solution,
    solve,
)
from .semigroup import GridFunction, SpectralGrid, semigroup_estimates
from .signal import (
    BUILTIN_PATHS,
    SignalFormatError,
    builtin_path,
    chen_residuals,
    lift,
    load_signal,
    sample_fbm,
    save_signal,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class SignalSpec:
    kind: str = "fbm"  # fbm | builtin | file
    hurst: float = 0.4
    components: int = 2
    fine_exponent: int = 10
    horizon: float = 1.0
    seed: int = 0
    builtin: str = "smooth"
    path: str = ""
    level: int = 3


@dataclass
class GridSpec:
    n: int = 1
    K: int = 32
    P: int = 128


@dataclass
class FieldSpec:
    name: str = "sine"
    c: str = "1.0"
    scale: float = 1.0
    M: float = 2.0


@dataclass
class InitialSpec:
    kind: str = "cos"  # cos | constant | random
    mode: int = 1
    amplitude: float = 1.0


@dataclass
class ConvergenceSpec:
    min_exponent: int = 4
    max_exponent: int = 10
    reference: str = "oracle"  # oracle | finest
    seeds: int = 1


@dataclass
class AuditSpec:
    triples: int = 12
    chen_random: int = 10_000


@dataclass
class ExperimentConfig:
    signal: SignalSpec = dc_field(default_factory=SignalSpec)
    grid: GridSpec = dc_field(default_factory=GridSpec)
    field: FieldSpec = dc_field(default_factory=FieldSpec)
    initial: InitialSpec = dc_field(default_factory=InitialSpec)
    solver: SolverConfig = dc_field(default_factory=SolverConfig)
    convergence: ConvergenceSpec = dc_field(default_factory=ConvergenceSpec)
    audit: AuditSpec = dc_field(default_factory=AuditSpec)

    def items(self):
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                yield f"{sec.name}.{f.name}", getattr(obj, f.name)

    def echo(self) -> dict:
        return {k: v for k, v in self.items()}

    def echo_lines(self) -> list[str]:
        return [f"{k} = {_fmt(v)}" for k, v in self.items()]


def _fmt(v) -> str:
    return "" if v is None else str(v)


def _convert(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if current is None:
            return None if raw == "" else int(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def set_key(cfg: ExperimentConfig, key: str, raw: str) -> None:
    if "." not in key:
        raise ConfigError(f"unknown key {key!r} (expected section.name)")
    sec, name = key.split(".", 1)
    if sec not in {f.name for f in fields(cfg)}:
        raise ConfigError(f"unknown key {key!r}")
    obj = getattr(cfg, sec)
    if name not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown key {key!r}")
    setattr(obj, name, _convert(raw, getattr(obj, name), key))


def parse_config_text(text: str, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        set_key(cfg, k.strip(), v)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    s, g = cfg.signal, cfg.grid
    if s.kind not in ("fbm", "builtin", "file"):
        raise ConfigError(f"signal.kind must be fbm, builtin or file, got {s.kind!r}")
    if s.kind == "fbm" and not 0 < s.hurst < 1:
        raise ConfigError("signal.hurst must lie in (0, 1)")
    if s.kind == "builtin" and s.builtin not in BUILTIN_PATHS:
        raise ConfigError(f"signal.builtin must be one of {sorted(BUILTIN_PATHS)}")
    if s.kind == "file" and not Path(s.path).is_file():
        raise ConfigError(f"signal file {s.path!r} does not exist")
    if s.level not in (2, 3):
        raise ConfigError("signal.level must be 2 or 3")
    if not 1 <= s.fine_exponent <= 16 or s.horizon <= 0 or s.components < 1:
        raise ConfigError("signal.fine_exponent in [1, 16], positive horizon and components required")
    try:
        SpectralGrid(g.n, g.K, g.P)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.field.name not in ("linear", "sine", "cutoff_sine", "zero", "additive"):
        raise ConfigError(f"unknown field.name {cfg.field.name!r}")
    if cfg.initial.kind not in ("cos", "constant", "random"):
        raise ConfigError(f"unknown initial.kind {cfg.initial.kind!r}")
    c = cfg.convergence
    if c.reference not in ("oracle", "finest") or c.min_exponent < 0 or c.max_exponent < c.min_exponent or c.seeds < 1:
        raise ConfigError("invalid convergence settings")
    try:
        cfg.solver.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# builders


def build_signal(cfg: ExperimentConfig, seed: int | None = None):
    s = cfg.signal
    if s.kind == "file":
        return load_signal(s.path)
    tg = TimeGrid.uniform(s.horizon, 2**s.fine_exponent)
    if s.kind == "fbm":
        p = sample_fbm(s.hurst, s.components, tg, s.seed if seed is None else seed)
    else:
        p = builtin_path(s.builtin, tg, s.components)
    return lift(p, s.level)


def build_grid(cfg: ExperimentConfig) -> SpectralGrid:
    return SpectralGrid(cfg.grid.n, cfg.grid.K, cfg.grid.P)


def field_coeffs(cfg: ExperimentConfig, N: int) -> list[float]:
    c = [float(v) for v in str(cfg.field.c).split(",") if v.strip()]
    if len(c) == 1:
        c = c * N
    if len(c) != N:
        raise ConfigError(f"field.c has {len(c)} entries for {N} components")
    return c


def build_field(cfg: ExperimentConfig, N: int):
    f = cfg.field
    if f.name == "linear":
        return builtin_field("linear", N, c=field_coeffs(cfg, N))
    return builtin_field(f.name, N, scale=f.scale, M=f.M)


def build_initial(cfg: ExperimentConfig, grid: SpectralGrid) -> GridFunction:
    ic = cfg.initial
    if ic.kind == "constant":
        return GridFunction.constant(grid, ic.amplitude)
    if ic.kind == "random":
        return GridFunction.random(grid, np.random.default_rng(cfg.signal.seed), kmax=ic.mode) * ic.amplitude
    return GridFunction.from_function(grid, lambda *x: ic.amplitude * np.cos(ic.mode * x[0]))


def additive_payloads(f, grid: SpectralGrid, eps: float = 0.0) -> list[GridFunction]:
    g = [GridFunction.from_values(grid, f.derivs(grid.coords, np.zeros(grid.shape), 0)[i]) for i in range(f.N)]
    if eps > 0:
        from .semigroup import apply_heat

        g = [apply_heat(v, eps) for v in g]
    return g


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("RHEAT_THREADS", "1")))
    except ValueError:
        return 1


def _header(cfg: ExperimentConfig, command: str) -> dict:
    return {"command": command, "version": __version__, "config": cfg.echo()}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _sidecar(out: Path, name: str, seconds: float) -> None:
    (out / f"{name}.walltime.log").write_text(f"wall_time_seconds={seconds:.3f}\n")


# ---------------------------------------------------------------------------
# commands


def cmd_audit(cfg: ExperimentConfig, out: Path) -> int:
    t0 = time.perf_counter()
    sig = build_signal(cfg)
    grid = build_grid(cfg)
    rng = np.random.default_rng(cfg.signal.seed)
    checks = []

    def check(name, residual, threshold):
        checks.append({"name": name, "residual": float(residual), "threshold": threshold,
                       "passed": bool(residual <= threshold)})

    for k, v in cochain_identity_residuals(rng).items():
        check(f"cochain.{k}", v, 1e-10)
    ch = chen_residuals(sig, n_random=cfg.audit.chen_random, rng=rng)
    check("chen.level2", ch.level2, 1e-12)
    if sig.has_level3:
        check("chen.level3", ch.level3, 1e-12)
    check("chen.shuffle", ch.shuffle, 1e-12)
    crp = ConvolutionalRoughPath(sig, grid)
    M = sig.grid.cells
    triples = np.sort(rng.integers(0, M + 1, size=(cfg.audit.triples, 3)), axis=1)
    phi = GridFunction.random(grid, rng, kmax=min(grid.K, 8))
    rep = crp.relation_audit(triples, phi)
    check("convrp.delta_hat_xx", rep.delta_hat_xx, 1e-10)
    check("convrp.decomposition_ax", rep.decomposition_ax, 1e-10)
    check("convrp.delta_hat_xxx2", rep.delta_hat_xxx2, 1e-10)
    if rep.delta_hat_xxx3 is not None:
        check("convrp.delta_hat_xxx3", rep.delta_hat_xxx3, 1e-9)
    check("convrp.s_eps_commutation", rep.s_eps_commutation, 1e-13)
    est = semigroup_estimates(grid, rng, n_fields=4)
    # observed constants against the per-mode sups of the multipliers
    check("semigroup.contraction", max(est["contraction"]), 1.0 + 1e-12)
    for a in (0.25, 0.5):
        check(f"semigroup.holder_{a}", max(est[f"holder_{a}"]), 1.0 + 1e-9)
        check(f"semigroup.regularization_{a}", max(est[f"regularization_{a}"]), 1.0 + a**a * math.exp(-a))
        check(f"semigroup.generator_{a}", max(est[f"generator_{a}"]), (1 - a) ** (1 - a) * math.exp(a - 1))
    ok = all(c["passed"] for c in checks)
    _write_json(out / "audit.json", {**_header(cfg, "audit"), "checks": checks, "passed": ok})
    _sidecar(out, "audit", time.perf_counter() - t0)
    return EXIT_OK if ok else EXIT_FAIL


def _oracle_reference(cfg, psi, crp, f, t):
    if f.name == "linear":
        return commuting_flow_solution(psi, crp, field_coeffs(cfg, f.N), t)
    if f.additive:
        return additive_solution(psi, crp, additive_payloads(f, crp.grid, cfg.solver.eps), t)
    raise ConfigError("oracle reference needs field.name linear, additive or zero")


def _convergence_cell(cfg: ExperimentConfig, seed: int):
    sig = build_signal(cfg, seed)
    grid = build_grid(cfg)
    crp = ConvolutionalRoughPath(sig, grid)
    f = build_field(cfg, sig.N)
    psi = build_initial(cfg, grid)
    fine = sig.grid.cells
    conv = cfg.convergence
    if 2**conv.max_exponent > fine:
        raise ConfigError("convergence.max_exponent exceeds the fine mesh")
    if conv.reference == "oracle":
        ref = _oracle_reference(cfg, psi, crp, f, sig.grid.T)
    else:
        ref = solve(replace(cfg.solver, steps=fine, audit=False), psi, crp, f).final
    rows = []
    for L in range(conv.min_exponent, conv.max_exponent + 1):
        try:
            y = solve(replace(cfg.solver, steps=2**L, audit=False), psi, crp, f).final
            d = y - ref
            rows.append((L, d.norm(np.inf), d.norm(2), "ok"))
        except BlowUpError:
            rows.append((L, math.nan, math.nan, "blowup"))
    return rows


def fitted_order(hs, errs) -> float:
    pts = [(h, e) for h, e in zip(hs, errs) if math.isfinite(e) and e > 0]
    if len(pts) < 2:
        return math.nan
    return float(np.polyfit(np.log([p[0] for p in pts]), np.log([p[1] for p in pts]), 1)[0])


def cmd_convergence(cfg: ExperimentConfig, out: Path) -> int:
    t0 = time.perf_counter()
    conv = cfg.convergence
    seeds = [cfg.signal.seed + k for k in range(conv.seeds)]
    with ThreadPoolExecutor(max_workers=_workers()) as ex:
        cells = list(ex.map(lambda s: _convergence_cell(cfg, s), seeds))
    T = cfg.signal.horizon if cfg.signal.kind != "file" else build_signal(cfg).grid.T
    n_rows = len(cells[0])
    rows = []
    for r in range(n_rows):
        L = cells[0][r][0]
        sup = [c[r][1] for c in cells]
        l2 = [c[r][2] for c in cells]
        status = "ok" if all(c[r][3] == "ok" for c in cells) else "blowup"
        rows.append([L, T / 2**L, float(np.mean(sup)), float(np.mean(l2)), status])
    hs = [r[1] for r in rows]
    order = fitted_order(hs, [r[2] for r in rows])
    buf = io.StringIO()
    buf.write(f"# rheat {__version__} convergence\n")
    for line in cfg.echo_lines():
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mesh_exponent", "h", "sup_error", "l2_error", "fitted_order", "status"])
    prev = None
    for L, h, sup, l2, status in rows:
        local = math.log2(prev / sup) if prev and sup > 0 and math.isfinite(sup) and math.isfinite(prev) else math.nan
        w.writerow([L, repr(h), repr(sup), repr(l2), repr(local), status])
        prev = sup
    buf.write(f"# fitted_order={order!r}\n")
    (out / "convergence.csv").write_text(buf.getvalue())
    _sidecar(out, "convergence", time.perf_counter() - t0)
    print(f"fitted_order={order:.4f}")
    return EXIT_OK


def cmd_oracle(cfg: ExperimentConfig, out: Path, tol_additive: float = 1e-10) -> int:
    t0 = time.perf_counter()
    sig = build_signal(cfg)
    grid = build_grid(cfg)
    crp = ConvolutionalRoughPath(sig, grid)
    psi = build_initial(cfg, grid)
    N = sig.N
    results = []
    add = builtin_field("additive", N)
    schemes = ["young_euler", "rough2", "rough2_regularized"] + (["rough3"] if sig.has_level3 else [])
    for scheme in schemes:
        eps = cfg.solver.eps if cfg.solver.eps > 0 else 0.05
        sc = replace(cfg.solver, scheme=scheme, eps=eps if scheme == "rough2_regularized" else cfg.solver.eps,
                     audit=False)
        y = solve(sc, psi, crp, add).final
        ref = additive_solution(psi, crp, additive_payloads(add, grid, sc.eps if scheme == "rough2_regularized" else 0.0),
                                sig.grid.T)
        err = (y - ref).norm(np.inf) / max(ref.norm(np.inf), 1e-300)
        results.append({"case": f"additive/{scheme}", "error": err, "tolerance": tol_additive,
                        "passed": bool(err <= tol_additive)})
    c = field_coeffs(cfg, N) if cfg.field.name == "linear" else [1.0] * N
    lin = builtin_field("linear", N, c=c)
    ref = commuting_flow_solution(psi, crp, c, sig.grid.T)
    errs = {}
    for scheme in ("young_euler", "rough2") + (("rough3",) if sig.has_level3 else ()):
        y = solve(replace(cfg.solver, scheme=scheme, audit=False), psi, crp, lin).final
        errs[scheme] = (y - ref).norm(np.inf) / max(ref.norm(np.inf), 1e-300)
        results.append({"case": f"commuting/{scheme}", "error": errs[scheme], "tolerance": None, "passed": True})
    ok = all(r["passed"] for r in results)
    _write_json(out / "oracle.json", {**_header(cfg, "oracle"), "results": results, "passed": ok})
    _sidecar(out, "oracle", time.perf_counter() - t0)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_solve(cfg: ExperimentConfig, out: Path) -> int:
    sig = build_signal(cfg)
    grid = build_grid(cfg)
    crp = ConvolutionalRoughPath(sig, grid)
    psi = build_initial(cfg, grid)
    f = build_field(cfg, sig.N)
    try:
        rep = solve(cfg.solver, psi, crp, f)
    except BlowUpError as exc:
        _write_json(out / "solve.json", {**_header(cfg, "solve"), "blowup": {"time": exc.time, "step": exc.step,
                                                                               "norm": exc.norm}})
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    rep.meta = _header(cfg, "solve")
    rep.write(out / "solve.json", snapshot_dir=out / "snapshots")
    return EXIT_OK


def cmd_sample(cfg: ExperimentConfig, out: Path) -> int:
    sig = build_signal(cfg)
    save_signal(sig, out / "signal.rhsg")
    _write_json(out / "sample.json", {**_header(cfg, "sample"), "cells": sig.grid.cells, "components": sig.N})
    return EXIT_OK


COMMANDS = {
    "audit": cmd_audit,
    "convergence": cmd_convergence,
    "oracle": cmd_oracle,
    "solve": cmd_solve,
    "sample": cmd_sample,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rheat", description="Rough heat equation solver: audits and experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="overrides signal.seed")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a configuration key (repeatable)")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file {args.config} does not exist")
        parse_config_text(args.config.read_text(), cfg)
    for ov in args.override:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not KEY=VALUE")
        k, v = ov.split("=", 1)
        set_key(cfg, k.strip(), v)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be nonnegative")
        cfg.signal.seed = args.seed
        cfg.solver.seed = args.seed
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = load_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out)
    except (ConfigError, SignalFormatError) as exc:
        print(f"rheat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
