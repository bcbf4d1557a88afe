"""Batch front-end: ``stoch-noether <command> --config FILE [--out DIR] [--seed N] [--quiet]``.

Exit status: 0 when every verdict passes, 2 on a failed verdict, 3 when a
verdict is inconclusive, 1 on any error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NoetherError, ParseError
from .merton import (
    FAMILIES,
    MertonParams,
    PathSpec,
    Utility,
    build_symmetry,
    merton_equation,
    normalize_family,
    sample_coefficient_path,
    solve_value_function,
)
from .numerics import Lagrangian, TimeGrid, euler_lagrange_integrate, simulate_merton, solve_hjb_fd
from .symmetry import JetSamplingBox, pathwise_scan, residual_scan
from .verify import (
    deterministic_constancy_check,
    evaluate_conserved,
    martingale_increment_test,
    martingale_mean_test,
)

COMMANDS = ("symcheck", "merton-solve", "merton-verify", "noether-classical", "shjb-check")
EXIT = {"pass": 0, "fail": 2, "inconclusive": 3}


@dataclass(frozen=True)
class RunConfig:
    command: str = "symcheck"
    r: float = 0.01
    rho: float = 0.1
    mu: float = 0.03
    sigma: float = 0.25
    utility: str = "power"
    theta: float = 0.5
    T: float = 1.0
    x0: float = 1.0
    N: int = 200
    M: int = 50000
    J: int = 101
    x_min: float = 0.5
    x_max: float = 2.0
    seed: int = 7
    family: str = "Omega3"
    out: str = "out"
    perturb: float = 0.0
    half_step: bool = True
    value_steps: int = 256
    symmetry_steps: int = 1024
    fd_levels: str = "51,101,201"
    fd_time_steps: int = 50
    box_n: int = 512
    box_seed: int = 0
    path_reversion: float = 2.0
    path_vol_of_vol: float = 0.5
    path_seed_b: int = 1001
    el_steps: int = 1000
    tol_residual: float = 1e-8
    tol_value: float = 1e-6
    tol_pathwise: float = 1e-6
    tol_mismatch: float = 1e-3
    tol_constancy: float = 1e-10
    tol_broken: float = 1e-3
    tol_oscillator: float = 1e-6
    z_crit: float = 4.0

    def merton_params(self) -> MertonParams:
        if self.utility == "log":
            util = Utility.log()
        else:
            util = Utility(self.utility, self.theta)
        return MertonParams(r=self.r, rho=self.rho, mu=self.mu, sigma=self.sigma, utility=util, T=self.T,
                            x0=self.x0)

    def tolerances(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name.startswith(("tol_", "z_"))}

    def echo(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(name, raw):
    kind = _FIELDS[name].type
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name} expects a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite")
        return v
    return raw


def _check_field(name, value):
    positive_int = {"N": 1, "M": 1, "J": 5, "value_steps": 16, "symmetry_steps": 16, "fd_time_steps": 1,
                    "box_n": 1, "el_steps": 1}
    if name in positive_int and value < positive_int[name]:
        raise ValueError(f"{name} must be >= {positive_int[name]}")
    if name == "sigma" and value < 1e-6:
        raise ValueError("sigma must satisfy sigma >= 1e-6")
    if name == "T" and value <= 0:
        raise ValueError("T must be > 0")
    if name == "rho" and value < 0:
        raise ValueError("rho must be >= 0")
    if name == "x0" and value <= 0:
        raise ValueError("x0 must be > 0")
    if name == "theta" and value in (0.0, 1.0):
        raise ValueError("theta must not be 0 or 1")
    if name == "utility" and value not in ("log", "power", "none"):
        raise ValueError("utility must be log, power or none")
    if name == "command" and value not in COMMANDS:
        raise ValueError(f"command must be one of {', '.join(COMMANDS)}")
    if name == "family" and value != "all":
        normalize_family(value)
    if name == "seed" and not 0 <= value < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    if name == "fd_levels":
        levels = [int(v) for v in value.split(",")]
        if len(levels) < 2 or min(levels) < 5:
            raise ValueError("fd_levels needs at least two grid sizes >= 5")
    if name.startswith(("tol_", "z_")) and value <= 0:
        raise ValueError(f"{name} must be positive")


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    values, lines = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"expected 'key = value', got {body!r}", lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _FIELDS:
            raise ParseError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", lineno)
        try:
            val = _convert(key, raw)
            _check_field(key, val)
        except ValueError as exc:
            raise ParseError(f"{key}: {exc}", lineno) from None
        values[key] = val
        lines[key] = lineno
    for key, val in (overrides or {}).items():
        _check_field(key, val)
        values[key] = val
    if "family" in values and values["family"] != "all":
        values["family"] = normalize_family(values["family"])
    cfg = RunConfig(**values)
    try:
        cfg.merton_params()
        if not 0 < cfg.x_min < cfg.x_max:
            raise ValueError("x_min/x_max: need 0 < x_min < x_max")
    except ValueError as exc:
        msg = str(exc)
        words = set(msg.replace("/", " ").replace(":", " ").split())
        cited = sorted(lines[k] for k in lines if k in words)
        raise ParseError(f"invalid configuration: {msg}", cited[0] if cited else 0) from None
    return cfg


def emit_config(cfg: RunConfig) -> str:
    out = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"


# output helpers -----------------------------------------------------------

def write_csv(path: Path, header, columns):
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=",".join(header), comments="", newline="\n")


def write_json(path: Path, cfg: RunConfig, payload: dict):
    doc = {
        "version": __version__,
        "command": cfg.command,
        "seed": cfg.seed,
        "tolerances": cfg.tolerances(),
        "config": cfg.echo(),
    }
    doc.update(payload)
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def combine(verdicts) -> str:
    verdicts = list(verdicts)
    if "fail" in verdicts:
        return "fail"
    if "inconclusive" in verdicts:
        return "inconclusive"
    return "pass"


def _families(cfg):
    return list(FAMILIES) if cfg.family == "all" else [cfg.family]


# commands -----------------------------------------------------------------

def cmd_symcheck(cfg: RunConfig, out: Path):
    params = cfg.merton_params()
    box = JetSamplingBox.merton_default(cfg.T, n=cfg.box_n, seed=cfg.box_seed)
    reports, verdicts = {}, []
    for fam in _families(cfg):
        try:
            sym = build_symmetry(params, fam, time_steps=cfg.symmetry_steps, certify=False)
        except NoetherError as exc:
            reports[fam] = {"error": str(exc), "verdict": "fail"}
            verdicts.append("fail")
            continue
        omega = sym.perturbed(cfg.perturb) if cfg.perturb else sym.omega
        rep = residual_scan(omega, merton_equation(params), box, merton_params=params)
        v = "pass" if rep.max_abs_residual <= cfg.tol_residual else "fail"
        d = rep.to_dict()
        d.update({"verdict": v, "basis": sym.basis_names, "perturbation_u_x": cfg.perturb})
        reports[fam] = d
        verdicts.append(v)
    verdict = combine(verdicts)
    write_json(out / "determining_report.json", cfg, {"verdict": verdict, "families": reports})
    return verdict, {k: reports[k].get("max_abs_residual") for k in reports}


def cmd_merton_solve(cfg: RunConfig, out: Path):
    params = cfg.merton_params()
    vf = solve_value_function(params, cfg.value_steps)
    grid = TimeGrid(0.0, cfg.T, cfg.fd_time_steps)
    x = np.linspace(cfg.x_min, cfg.x_max, cfg.J)
    tt, xx = np.meshgrid(grid.times, x, indexing="ij")
    res = vf.pde_residual(tt, xx)
    write_csv(out / "value.csv", ["t", "x", "U", "U_x", "U_xx", "pde_residual"],
              [tt.ravel(), xx.ravel(), vf.U(tt, xx).ravel(), vf.U_x(tt, xx).ravel(), vf.U_xx(tt, xx).ravel(),
               res.ravel()])
    levels = [int(v) for v in cfg.fd_levels.split(",")]
    sup, interior = [], []
    for J in levels:
        sol = solve_hjb_fd(params, (cfg.x_min, cfg.x_max), J, grid)
        ref = vf.U(sol.times[:, None], sol.x[None, :])
        err = np.abs(sol.values - ref)
        sup.append(float(err.max()))
        interior.append(float(err[:, J // 4: J - J // 4].max()))
    write_csv(out / "fd_error.csv", ["J", "sup_error", "interior_error"], [levels, sup, interior])
    pde_ok = float(np.max(np.abs(res))) <= cfg.tol_value
    mono = all(b < a for a, b in zip(sup, sup[1:]))
    verdict = "pass" if pde_ok and mono else "fail"
    return verdict, {"max_pde_residual": float(np.max(np.abs(res))), "fd_sup_errors": sup}


def cmd_merton_verify(cfg: RunConfig, out: Path):
    params = cfg.merton_params()
    vf = solve_value_function(params, cfg.value_steps)
    grid = TimeGrid(0.0, cfg.T, cfg.N)
    refine = 2 if cfg.half_step else 1
    coarse = simulate_merton(params, vf, grid, cfg.M, cfg.seed, noise_refinement=refine, store_controls=False)
    fine = simulate_merton(params, vf, grid.refine(2), cfg.M, cfg.seed, store_controls=False) if cfg.half_step else None
    fams = _families(cfg)
    reports, verdicts = {}, []
    for fam in fams:
        sym = build_symmetry(params, fam, time_steps=cfg.symmetry_steps)
        omega = sym.perturbed(cfg.perturb) if cfg.perturb else None
        sc = evaluate_conserved(sym, vf, coarse, omega)
        sf = evaluate_conserved(sym, vf, fine, omega) if fine is not None else None
        mr = martingale_mean_test(sc, cfg.z_crit, sf)
        ir = martingale_increment_test(sc, z_crit=cfg.z_crit)
        name = "conserved_means.csv" if len(fams) == 1 else f"conserved_means_{fam}.csv"
        write_csv(out / name, ["t", "mean", "stderr", "drift_z", "trimmed_mean", "n_valid_paths"],
                  [mr.times, mr.mean, mr.stderr, mr.drift_z, mr.trimmed_mean,
                   np.full(mr.times.shape, mr.n_valid_paths)])
        v = combine([mr.verdict, ir.verdict])
        reports[fam] = {"verdict": v, "mean_test": mr.to_dict(), "increment_test": ir.to_dict(),
                        "certified_residual": sym.report.max_abs_residual}
        verdicts.append(v)
    verdict = combine(verdicts)
    write_json(out / "martingale_report.json", cfg, {
        "verdict": verdict,
        "clamp_events": coarse.clamp_events + (fine.clamp_events if fine is not None else 0),
        "perturbation_u_x": cfg.perturb,
        "families": reports,
    })
    return verdict, {k: reports[k]["mean_test"]["max_abs_z"] for k in reports}


def classical_suite(steps: int = 1000):
    """Euler-Lagrange runs: free particle, broken translation, oscillator."""
    grid = TimeGrid(0.0, 1.0, steps)
    free = Lagrangian(lambda t, x, a: -0.5 * a @ a, grad_x=lambda t, x, a: np.zeros_like(x),
                      grad_a=lambda t, x, a: -a, hess_aa=lambda t, x, a: -np.eye(x.size),
                      hess_ax=lambda t, x, a: np.zeros((x.size, x.size)), name="free")
    broken = Lagrangian(lambda t, x, a: -0.5 * a @ a + 0.1 * x.sum(), grad_x=lambda t, x, a: 0.1 * np.ones_like(x),
                        grad_a=lambda t, x, a: -a, hess_aa=lambda t, x, a: -np.eye(x.size),
                        hess_ax=lambda t, x, a: np.zeros((x.size, x.size)), name="broken")
    osc = Lagrangian(lambda t, x, a: -0.5 * a @ a + 0.5 * x @ x, grad_x=lambda t, x, a: x,
                     grad_a=lambda t, x, a: -a, hess_aa=lambda t, x, a: -np.eye(x.size),
                     hess_ax=lambda t, x, a: np.zeros((x.size, x.size)), name="oscillator")
    tf = euler_lagrange_integrate(free, [0.0], [1.0], grid)
    tb = euler_lagrange_integrate(broken, [0.0], [1.0], grid)
    to = euler_lagrange_integrate(osc, [1.0], [0.0], grid)
    t = grid.times
    # translation f = 1: conserved momentum f * dL/da = -a
    p_free = -tf.a[:, 0]
    p_broken = -tb.a[:, 0]
    energy = 0.5 * to.a[:, 0] ** 2 + 0.5 * to.x[:, 0] ** 2
    osc_err = np.maximum(np.abs(to.x[:, 0] - np.cos(t)), np.abs(to.a[:, 0] + np.sin(t)))
    return t, p_free, p_broken, energy, osc_err


def cmd_noether_classical(cfg: RunConfig, out: Path):
    t, p_free, p_broken, energy, osc_err = classical_suite(cfg.el_steps)
    write_csv(out / "constancy.csv", ["t", "free_momentum", "broken_momentum", "oscillator_energy",
                                      "oscillator_error"], [t, p_free, p_broken, energy, osc_err])
    dev_free = deterministic_constancy_check(p_free)
    dev_broken = deterministic_constancy_check(p_broken)
    ok = dev_free <= cfg.tol_constancy and dev_broken >= cfg.tol_broken and osc_err.max() <= cfg.tol_oscillator
    return ("pass" if ok else "fail"), {"free": dev_free, "broken": dev_broken, "oscillator": float(osc_err.max())}


def cmd_shjb_check(cfg: RunConfig, out: Path):
    params = cfg.merton_params()
    grid = TimeGrid(0.0, cfg.T, cfg.N)
    spec = PathSpec("log-ou", mu=cfg.mu, sigma_mean=cfg.sigma, reversion=cfg.path_reversion,
                    vol_of_vol=cfg.path_vol_of_vol)
    path_a = sample_coefficient_path(spec, grid, cfg.r, seed=cfg.seed)
    path_b = sample_coefficient_path(spec, grid, cfg.r, seed=cfg.path_seed_b)
    box = JetSamplingBox.merton_default(cfg.T, n=cfg.box_n, seed=cfg.box_seed)
    reports, verdicts = {}, []
    for fam in (["Omega2"] if cfg.family == "all" else [cfg.family]):
        try:
            sym = build_symmetry(params, fam, value_path=path_a, time_steps=cfg.symmetry_steps, certify=False)
        except NoetherError as exc:
            reports[fam] = {"verdict": "fail", "error": str(exc)}
            verdicts.append("fail")
            continue
        ra = pathwise_scan(sym.omega, params, path_a, box)
        rb = pathwise_scan(sym.omega, params, path_b, box)
        v = "pass" if ra.max_abs_residual <= cfg.tol_pathwise and rb.max_abs_residual >= cfg.tol_mismatch else "fail"
        reports[fam] = {"verdict": v, "own_path": ra.to_dict(), "independent_path": rb.to_dict(),
                        "path_seeds": [cfg.seed, cfg.path_seed_b]}
        verdicts.append(v)
    verdict = combine(verdicts)
    write_json(out / "pathwise_report.json", cfg, {"verdict": verdict, "families": reports})
    return verdict, {k: (reports[k].get("own_path", {}).get("max_abs_residual"),
                         reports[k].get("independent_path", {}).get("max_abs_residual")) for k in reports}


DISPATCH = {
    "symcheck": cmd_symcheck,
    "merton-solve": cmd_merton_solve,
    "merton-verify": cmd_merton_verify,
    "noether-classical": cmd_noether_classical,
    "shjb-check": cmd_shjb_check,
}


def run(cfg: RunConfig, out: Path | None = None, quiet: bool = True) -> int:
    out = Path(out or cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        verdict, summary = DISPATCH[cfg.command](cfg, out)
    except (OSError, NoetherError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not quiet:
        print(f"{cfg.command}: {verdict} {json.dumps(_jsonable(summary))}")
    return EXIT[verdict]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stoch-noether", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat key = value configuration file")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, default=None, help="base seed (overrides the config)")
    p.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text(encoding="utf-8")
        overrides = {"command": args.command}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = parse_config(text, overrides)
    except (OSError, ParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run(cfg, quiet=args.quiet)


if __name__ == "__main__":
    sys.exit(main())
