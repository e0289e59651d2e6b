"""Command line batch driver.

Usage::

    robust-stopper <job> --config <path> [--out <dir>] [--seed <int>]

Jobs are ``value``, ``saddle``, ``oracle-check``, ``converge`` and ``rho``.
The config is a JSON document; see the README for the full layout. Exit
status is 0 on success, 2 for configuration errors, 3 when an invariant check
fails and 4 when an exhaustive job exceeds its budget.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .errors import (
    AssumptionViolationError,
    BudgetError,
    LatticeTooCoarseError,
    ObstacleViolationError,
    ParameterError,
    RobustStopperError,
    ShapeError,
    UnsupportedRuleError,
)
from .lattice import (
    LatticeModel,
    deterministic_rule,
    format_number,
    payoff_from_function,
    payoff_from_table,
    read_payoff_csv,
    write_node_csv,
)
from .oracle import FullTree, enumerate_game, verify_minimax, verify_saddle_exhaustive
from .penalty import PenaltySpec, f_eval, load_tabulated_csv
from .rbsde import extract_saddle
from .stopping import ThetaGrid, evaluate_rho, robust_value_exact, robust_value_grid, tau_V, tol_hit

JOBS = ("value", "saddle", "oracle-check", "converge", "rho")
EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_BUDGET = 0, 2, 3, 4


class ConfigError(RobustStopperError):
    module = "cli"


# -- payoff registry ------------------------------------------------------

def _price(p, x):
    return p.get("s0", 1.0) * math.exp(p.get("sigma", 1.0) * x)


PAYOFFS = {
    "constant": lambda p: lambda t, x: p.get("value", 0.0),
    "put": lambda p: lambda t, x: max(p.get("strike", 1.0) - _price(p, x), 0.0),
    "call_capped": lambda p: lambda t, x: min(max(_price(p, x) - p.get("strike", 1.0), 0.0),
                                              p.get("cap", 1.0)),
    "digital": lambda p: lambda t, x: p.get("amount", 1.0) if x >= p.get("level", 0.0) else 0.0,
    "linear_clipped": lambda p: lambda t, x: min(max(p.get("a", 0.0) + p.get("b", 1.0) * x
                                                     + p.get("c", 0.0) * t,
                                                     p.get("low", -1.0)), p.get("high", 1.0)),
}


def _require(cfg, key, where):
    if key not in cfg:
        raise ConfigError(f"missing key {key!r}", field=f"{where}.{key}" if where else key,
                          hint="see the README for the config layout")
    return cfg[key]


def _number(cfg, key, where, default=None):
    raw = cfg.get(key, default) if default is not None else _require(cfg, key, where)
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key} must be a number, got {raw!r}", field=f"{where}.{key}")


def build_model(cfg) -> LatticeModel:
    lat = _require(cfg, "lattice", "")
    n = _require(lat, "n_steps", "lattice")
    if not isinstance(n, int):
        raise ConfigError(f"lattice.n_steps must be an integer, got {n!r}", field="lattice.n_steps")
    return LatticeModel(n, _number(lat, "dt", "lattice"))


def build_payoff(model, pcfg, base_dir: Path, where="payoff"):
    bound = pcfg.get("bound")
    if "csv" in pcfg:
        path = base_dir / pcfg["csv"]
        if not path.exists():
            raise ConfigError(f"payoff file {path} does not exist", field=f"{where}.csv")
        return read_payoff_csv(path, model, bound)
    if "table" in pcfg:
        rows = pcfg["table"]
        n = model.n_steps
        if len(rows) != n + 1 or any(len(r) != t + 1 for t, r in enumerate(rows)):
            raise ConfigError(f"{where}.table needs {n + 1} rows of lengths 1..{n + 1}",
                              field=f"{where}.table")
        values = np.full((n + 1, n + 1), np.nan)
        for t, r in enumerate(rows):
            values[t, : t + 1] = r
        return payoff_from_table(model, values, bound)
    name = _require(pcfg, "name", where)
    if name not in PAYOFFS:
        raise ConfigError(f"unknown payoff {name!r}", field=f"{where}.name",
                          hint=f"choose one of {sorted(PAYOFFS)}, or give 'table' or 'csv'")
    g = PAYOFFS[name](pcfg.get("params", {}))
    if bound is None:
        vals = [abs(g(t * model.dt, model.state(t, j))) for t, j in model.nodes()]
        bound = max(vals)
    return payoff_from_function(model, g, float(bound))


def build_penalty(cfg, base_dir: Path) -> PenaltySpec:
    pcfg = dict(_require(cfg, "penalty", ""))
    family = pcfg.pop("family", None)
    assumptions = pcfg.pop("assumptions", {})
    tol = cfg.get("tolerances", {}).get("tol_opt")
    if tol is not None:
        assumptions = {**assumptions, "tol_opt": float(tol)}
    if family == "entropic":
        return PenaltySpec.entropic(_number(pcfg, "r", "penalty"), **assumptions)
    if family == "power":
        return PenaltySpec.power(pcfg.get("Lam", 1.0), float(pcfg.get("lam", 0.0)),
                                 pcfg.get("Ups", 0.0), **assumptions)
    if family == "tabulated":
        if "csv" in pcfg:
            paths = pcfg["csv"] if isinstance(pcfg["csv"], list) else [pcfg["csv"]]
            return load_tabulated_csv([base_dir / p for p in paths], **assumptions)
        return PenaltySpec.tabulated(_require(pcfg, "z_grid", "penalty"),
                                     _require(pcfg, "values", "penalty"), **assumptions)
    raise ConfigError(f"unknown penalty family {family!r}", field="penalty.family",
                      hint="use entropic, power or tabulated")


def build_grid(cfg, model, spec):
    g = cfg.get("grid", "exact")
    if g == "exact":
        return None
    if not isinstance(g, dict):
        raise ConfigError("grid must be 'exact' or an object with theta values",
                          field="grid")
    if "theta" in g:
        theta = [float(x) for x in g["theta"]]
        if "k" in g:
            k = float(g["k"])
        else:
            costs = [float(np.max(f_eval(spec, t, np.asarray(theta))))
                     for t in range(model.n_steps)]
            k = max([abs(x) for x in theta] + costs)
        grid = ThetaGrid(tuple(theta), k)
    else:
        grid = ThetaGrid.for_bound(model, spec, _number(g, "k", "grid"), int(g.get("points", 9)))
    grid.validate(model, spec)
    return grid


def _tol(cfg, Y):
    t = cfg.get("tolerances", {}).get("tol_hit")
    return tol_hit(Y) if t is None else float(t)


# -- jobs -----------------------------------------------------------------

def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def job_value(cfg, out: Path, seed: int, base_dir: Path):
    model = build_model(cfg)
    Y = build_payoff(model, _require(cfg, "payoff", ""), base_dir)
    spec = build_penalty(cfg, base_dir)
    grid = build_grid(cfg, model, spec)
    nu = int(cfg.get("nu", 0))
    tol = _tol(cfg, Y)
    if grid is None:
        vs = robust_value_exact(model, Y, spec, nu, tol)
    else:
        vs = robust_value_grid(model, Y, spec, grid, nu, tol)
    n = model.n_steps
    theta = np.full((n + 1, n + 1), np.nan)
    step = vs.theta if vs.theta is not None else vs.slope
    theta[:n, :n] = np.where(model.step_mask(), step, np.nan)
    col = "theta" if vs.theta is not None else "slope"
    files = [write_node_csv(out / "value.csv", model,
                            {"payoff": Y.values, "value": vs.v, "stop": vs.stop_region,
                             col: theta})]
    mask = model.node_mask()
    mask[:nu] = False
    dominated = bool(np.all(vs.v[mask] >= Y.values[mask] - tol))
    terminal = bool(np.allclose(vs.v[n, : n + 1], Y.terminal, rtol=0, atol=tol))
    summary = {"root_value": vs.root(), "mode": vs.mode, "nu": nu,
               "level_nu_values": vs.v[nu, : nu + 1].tolist(),
               "checks": {"value_dominates_payoff": dominated, "terminal_matches": terminal}}
    files.append(_write_json(out / "summary.json", summary))
    return files, dominated and terminal


def job_saddle(cfg, out: Path, seed: int, base_dir: Path):
    model = build_model(cfg)
    Y = build_payoff(model, _require(cfg, "payoff", ""), base_dir)
    spec = build_penalty(cfg, base_dir)
    grid = build_grid(cfg, model, spec)
    opts = cfg.get("saddle", {})
    cert = extract_saddle(model, Y, spec, grid=grid, seed=seed,
                          max_clip_fraction=float(opts.get("max_clip_fraction", 0.05)))
    sol = cert.solution
    files = [
        write_node_csv(out / "rbsde.csv", model, {"gamma": sol.gamma, "z": sol.z, "dk": sol.dk}),
        write_node_csv(out / "theta_star.csv", model, {"theta": cert.theta_star.theta}, steps=True),
        write_node_csv(out / "sigma_star.csv", model, {"stop": cert.sigma_star.decision}),
        _write_json(out / "certificate.json", cert.as_dict()),
    ]
    return files, cert.passed


def job_oracle(cfg, out: Path, seed: int, base_dir: Path):
    model = build_model(cfg)
    Y = build_payoff(model, _require(cfg, "payoff", ""), base_dir)
    spec = build_penalty(cfg, base_dir)
    grid = build_grid(cfg, model, spec)
    if grid is None:
        raise ConfigError("oracle-check needs a finite tilt grid", field="grid",
                          hint="give grid.theta values")
    nu = int(cfg.get("nu", 0))
    cap = int(float(cfg.get("oracle", {}).get("cap", 1e7)))
    tree = FullTree.from_payoff(Y)
    game = enumerate_game(tree, spec, grid, nu, cap)
    vs = robust_value_grid(model, Y, spec, grid, nu, _tol(cfg, Y))
    dp = vs.v[nu, tree.ups[game.roots]]
    report = verify_minimax(game, tree, spec, nu, dp)
    files = [_write_json(out / "minimax.json", report)]
    ok = report["passed"]
    if nu == 0:
        try:
            cert = extract_saddle(model, Y, spec, grid=grid, seed=seed)
        except (LatticeTooCoarseError, AssumptionViolationError) as exc:
            saddle = {"skipped": exc.describe()}
        else:
            saddle = verify_saddle_exhaustive(cert, game, tree, spec)
            ok = ok and saddle["passed"]
        files.append(_write_json(out / "saddle.json", saddle))
    return files, ok


def _order_estimates(dts, values):
    diffs = [None] + [values[i] - values[i - 1] for i in range(1, len(values))]
    orders = [None, None]
    for i in range(2, len(values)):
        a, b = abs(diffs[i - 1]), abs(diffs[i])
        if a > 0 and b > 0:
            orders.append(math.log(a / b) / math.log(dts[i - 1] / dts[i]))
        else:
            orders.append(None)
    return diffs, orders


def job_converge(cfg, out: Path, seed: int, base_dir: Path):
    conv = _require(cfg, "converge", "")
    steps = [int(n) for n in _require(conv, "n_steps", "converge")]
    if len(steps) < 2 or any(b <= a for a, b in zip(steps, steps[1:])):
        raise ConfigError("converge.n_steps must be an increasing list of at least two sizes",
                          field="converge.n_steps")
    base = build_model(cfg)
    horizon = float(conv.get("horizon", base.horizon))
    pcfg = _require(cfg, "payoff", "")
    if "name" not in pcfg:
        raise ConfigError("converge needs a named payoff that can be evaluated on any lattice",
                          field="payoff.name")
    spec = build_penalty(cfg, base_dir)
    dts, values = [], []
    for n in steps:
        model = LatticeModel(n, horizon / n)
        Y = build_payoff(model, pcfg, base_dir)
        grid = build_grid(cfg, model, spec)
        vs = (robust_value_exact(model, Y, spec) if grid is None
              else robust_value_grid(model, Y, spec, grid))
        dts.append(model.dt)
        values.append(vs.root())
    diffs, orders = _order_estimates(dts, values)
    path = out / "converge.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_steps", "dt", "root_value", "difference", "order"])
        for row in zip(steps, dts, values, diffs, orders):
            w.writerow([row[0]] + [format_number(x) for x in row[1:]])
    return [path], all(math.isfinite(v) for v in values)


def job_rho(cfg, out: Path, seed: int, base_dir: Path):
    model = build_model(cfg)
    Y = build_payoff(model, _require(cfg, "payoff", ""), base_dir)
    spec = build_penalty(cfg, base_dir)
    grid = build_grid(cfg, model, spec)
    if grid is None:
        raise ConfigError("rho needs a finite tilt grid", field="grid",
                          hint="give grid.theta values")
    rcfg = cfg.get("rho", {})
    nu = int(rcfg.get("nu", cfg.get("nu", 0)))
    gcfg = rcfg.get("gamma", {"level": model.n_steps})
    if "level" in gcfg:
        level = int(gcfg["level"])
        if not nu <= level <= model.n_steps:
            raise ConfigError(f"rho.gamma.level must lie in [{nu}, {model.n_steps}]",
                              field="rho.gamma.level")
        gamma = deterministic_rule(model, level)
    elif gcfg.get("region") == "tau":
        vs = robust_value_grid(model, Y, spec, grid, nu, _tol(cfg, Y))
        gamma = tau_V(model, vs, Y, nu)
    else:
        raise ConfigError("rho.gamma must give a level or region 'tau'", field="rho.gamma")
    xi = build_payoff(model, rcfg["xi"], base_dir, "rho.xi") if "xi" in rcfg else Y
    rho = evaluate_rho(model, spec, grid, nu, gamma, xi)
    path = out / "rho.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "j", "state", "rho"])
        for j, v in enumerate(rho):
            w.writerow([nu, j, format_number(model.state(nu, j)), format_number(v)])
    return [path], bool(np.all(np.isfinite(rho)))


RUNNERS = {"value": job_value, "saddle": job_saddle, "oracle-check": job_oracle,
           "converge": job_converge, "rho": job_rho}


def run(job: str, config_path, out=None, seed: int = 0) -> int:
    """Run one job; returns the exit status."""
    config_path = Path(config_path)
    try:
        raw = config_path.read_bytes()
    except OSError as exc:
        print(f"[cli] cannot read config: {exc}; field: --config", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = json.loads(raw)
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object", field="config")
        out_dir = Path(out if out is not None else cfg.get("output", "out"))
        out_dir.mkdir(parents=True, exist_ok=True)
        files, ok = RUNNERS[job](cfg, out_dir, seed, config_path.parent)
    except json.JSONDecodeError as exc:
        print(f"[cli] config is not valid JSON: {exc}; field: --config", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetError as exc:
        print(exc.describe() + f"; counts: {exc.counts}", file=sys.stderr)
        return EXIT_BUDGET
    except (ConfigError, ParameterError, ShapeError, LatticeTooCoarseError) as exc:
        print(exc.describe(), file=sys.stderr)
        return EXIT_CONFIG
    except (AssumptionViolationError, ObstacleViolationError, UnsupportedRuleError) as exc:
        print(exc.describe(), file=sys.stderr)
        return EXIT_INVARIANT
    manifest = {
        "job": job,
        "version": __version__,
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "seed": seed,
        "backend": kernels.BACKEND,
        "files": sorted(p.name for p in files),
        "checks_passed": bool(ok),
    }
    _write_json(out_dir / "manifest.json", manifest)
    if not ok:
        print(f"[cli] invariant checks failed for job {job}; see {out_dir}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robust-stopper",
                                 description="Robust optimal stopping on a binomial lattice.")
    ap.add_argument("job", choices=JOBS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--out", default=None, help="output directory (overrides config 'output')")
    ap.add_argument("--seed", type=int, default=0, help="seed for sampled deviation sets")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.job, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
