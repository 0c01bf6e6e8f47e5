"""Command-line entry point: ``mildbbm <subcommand> [--config FILE] [--set key=value ...]``.

Exit status: 0 success, 2 invalid configuration, 3 numerical failure.
Errors are reported as one JSON record on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__
from . import experiments as ex
from .branching import run_batch
from .config import ConfigError, RunConfig
from .obstacles import ObstacleField, empirical_coverage, kappa
from .pde import (NumericalError, exit_prob_1d, first_integral_1d, solve_radial_bvp,
                  vt_const, vtg_semigroup)
from .rng import as_u64, hash2
from .testfunctions import TestFunction

EXIT_CONFIG, EXIT_NUMERICAL = 2, 3

COMMANDS = ("field", "simulate", "hitprob", "exitprob-oracle", "bvp", "theorem1", "corollary",
            "largedev", "mixing", "moments", "selftest")


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([ex._fmt(v) for v in r])
    return buf.getvalue()


def _write(outdir, name, csv_text=None, summary=None):
    os.makedirs(outdir, exist_ok=True)
    if csv_text is not None:
        with open(os.path.join(outdir, f"{name}.csv"), "w", encoding="utf-8", newline="") as f:
            f.write(csv_text)
    if summary is not None:
        with open(os.path.join(outdir, f"{name}.summary.json"), "w", encoding="utf-8", newline="") as f:
            f.write(json.dumps(ex._jsonable(summary), indent=2, sort_keys=True) + "\n")


def _stamp(cfg: RunConfig, name: str, seed, extra=None) -> dict:
    echo = cfg.echo()
    out = {"name": name, "version": __version__, "config": echo,
           "config_hash": ex.ExperimentResult(name, echo, [], [], {}).config_hash(),
           "master_seed": seed}
    if extra:
        out.update(extra)
    return out


def _finish(cfg: RunConfig, res: ex.ExperimentResult, args) -> int:
    res.config = {"run": cfg.echo(), "experiment": res.config}
    res.write(cfg["output.dir"])
    sys.stdout.write(res.to_csv())
    return 0


# -- subcommands ---------------------------------------------------------------

def cmd_field(cfg: RunConfig, args) -> int:
    fld = cfg.field()
    if not isinstance(fld, ObstacleField):
        raise ConfigError(["field.mode: the field subcommand needs obstacles"])
    d = fld.dimension
    w = cfg["exp.window"]
    if len(w) == 2:
        lo, hi = [w[0]] * d, [w[1]] * d
    elif len(w) == 2 * d:
        lo, hi = w[:d], w[d:]
    else:
        raise ConfigError([f"exp.window: need 2 or {2 * d} numbers"])
    try:
        est = empirical_coverage(fld, (lo, hi), cfg["exp.n"], seed=cfg["sim.seed"])
    except ValueError as exc:
        raise ConfigError([f"exp.window: {exc}"]) from None
    window = " x ".join(f"[{a!r},{b!r}]" for a, b in zip(lo, hi))
    text = _csv_text(["window", "n", "estimate", "se", "kappa_analytic"],
                     [[window, est.n, est.estimate, est.se, est.kappa_analytic]])
    _write(cfg["output.dir"], "field", text, _stamp(cfg, "field", fld.master_seed,
                                                      {"estimate": est.estimate, "se": est.se,
                                                       "kappa_analytic": est.kappa_analytic}))
    sys.stdout.write(text)
    return 0


def _replicate_rows(cfg, res, seed):
    rows = []
    for i in range(res.replicates):
        rep = res.first_replicate + i
        key = int(hash2(as_u64(seed), np.uint64(rep)))
        rows.append([rep, bool(res.hit[i]), float(res.max_distance[i]), float(res.extinction_time[i]),
                     bool(res.censored[i]), int(res.n_vertices[i]), key])
    return rows


def _sim_common(cfg: RunConfig, name: str, args):
    sc = cfg.sim_config()
    fld = cfg.field()
    nu = cfg.nu()
    n = cfg["sim.replicates"]
    try:
        res = run_batch(sc, fld, nu, n, threads=args.threads)
    except ValueError as exc:
        raise ConfigError([f"sim: {exc}"]) from None
    cols = ["replicate", "hit", "max_distance", "extinction_time", "censored", "n_vertices", "seed"]
    text = _csv_text(cols, _replicate_rows(cfg, res, sc.seed))
    k = int(res.hit.sum())
    p = k / n
    summary = _stamp(cfg, name, sc.seed, {
        "replicates": n, "hits": k, "estimate": p, "se": math.sqrt(p * (1 - p) / n),
        "censored": int(res.censored.sum()), "censored_policy": "censored = no-hit",
        "mean_vertices": float(res.n_vertices.mean())})
    _write(cfg["output.dir"], name, text, summary)
    return text, summary


def cmd_simulate(cfg, args) -> int:
    text, _ = _sim_common(cfg, "simulate", args)
    sys.stdout.write(text)
    return 0


def cmd_hitprob(cfg, args) -> int:
    if cfg["sim.stop_domain"] == "none":
        raise ConfigError(["sim.stop_domain: hitprob needs 'ball' or 'halfspace'"])
    _, summary = _sim_common(cfg, "hitprob", args)
    print(json.dumps({k: summary[k] for k in ("replicates", "hits", "estimate", "se", "censored")}))
    return 0


def cmd_exitprob(cfg, args) -> int:
    nu = cfg.nu()
    rows = []
    for eps in cfg["exp.eps_list"]:
        p = exit_prob_1d(eps, np.asarray(cfg["exp.x_list"]), nu)
        rows += [[eps, x, float(v)] for x, v in zip(cfg["exp.x_list"], p)]
    text = _csv_text(["epsilon", "x", "p"], rows)
    _write(cfg["output.dir"], "exitprob-oracle", text, _stamp(cfg, "exitprob-oracle", None))
    sys.stdout.write(text)
    return 0


def cmd_bvp(cfg, args) -> int:
    nu = cfg.nu()
    s2 = cfg["exp.sigma2"] or nu.variance
    sol = solve_radial_bvp(cfg["exp.a"], s2, cfg.dimension(), cfg["exp.R_A"], ladder=cfg["exp.ladder"])
    doc = _stamp(cfg, "bvp", None, {
        "a": sol.a, "sigma2": sol.sigma2, "dimension": sol.dimension, "R_A": sol.R_A, "u0": sol.u0,
        "ladder": [{"n": n, "u_n0": v} for n, v in sol.boundary_ladder],
        "diagnostics": sol.diagnostics})
    text = _csv_text(["n", "u_n0"], sol.boundary_ladder)
    _write(cfg["output.dir"], "bvp", text, doc)
    print(json.dumps(ex._jsonable({k: doc[k] for k in ("u0", "ladder", "diagnostics")}), indent=2))
    return 0


def cmd_theorem1(cfg, args) -> int:
    R_list = cfg["exp.R_list"]
    res = ex.theorem1(cfg["exp.a"], R_list, cfg.field(), cfg.nu(), cfg.replicates(len(R_list)),
                      dt=cfg["sim.dt"], seed=cfg["sim.seed"], env_seeds=cfg.env_seeds(),
                      threads=args.threads, d=cfg.dimension())
    return _finish(cfg, res, args)


def cmd_corollary(cfg, args) -> int:
    res = ex.corollary_escape(cfg["exp.b"], cfg["exp.eps_list"], cfg["exp.r_grid"], cfg.field(),
                              cfg.nu(), cfg.replicates(1), dt=cfg["sim.dt"], seed=cfg["sim.seed"],
                              env_seeds=cfg.env_seeds(), threads=args.threads, d=cfg.dimension())
    return _finish(cfg, res, args)


def cmd_largedev(cfg, args) -> int:
    pairs = cfg["exp.eps_R_pairs"]
    res = ex.largedev(pairs, cfg.field(), cfg.nu(), cfg.replicates(len(pairs)), dt=cfg["sim.dt"],
                      seed=cfg["sim.seed"], env_seeds=cfg.env_seeds(), threads=args.threads,
                      homogeneous_control=cfg["exp.homogeneous_control"])
    return _finish(cfg, res, args)


def cmd_mixing(cfg, args) -> int:
    fld = cfg.field()
    if not isinstance(fld, ObstacleField):
        raise ConfigError(["field.mode: mixing needs obstacles"])
    res = ex.mixing_decay(cfg["exp.theta"], cfg["exp.g"], cfg["exp.eps_list"], cfg["exp.n_fields"], fld,
                          y=cfg["exp.y"], seed=cfg["sim.seed"])
    return _finish(cfg, res, args)


def cmd_moments(cfg, args) -> int:
    res = ex.homogenization_moments(cfg["exp.t_list"], cfg["exp.eps_list"], cfg.field(), cfg.nu(),
                                    cfg.replicates(1), g=cfg["exp.g"], dt=cfg["sim.dt"], seed=cfg["sim.seed"],
                                    env_seeds=cfg.env_seeds(), threads=args.threads,
                                    control=cfg["exp.control"], control_dt=cfg["exp.control_dt"],
                                    env_rows=cfg["exp.env_rows"])
    return _finish(cfg, res, args)


def selftest_checks(bvp_perturbation: float = 0.0, bvp_tolerance: float = 1e-4):
    """Fast invariant suite: list of (name, passed, detail)."""
    from .obstacles import ShapeLaw
    from .offspring import OffspringDistribution
    out = []
    k = kappa(ShapeLaw.single(1.0, 0.5), 1)
    out.append(("kappa formula d=1", abs(k - (1 - math.exp(-1))) < 1e-15, f"{k!r}"))
    k2 = kappa(ShapeLaw.single(1.0, 1 / math.pi), 2)
    out.append(("kappa formula d=2", abs(k2 - (1 - math.exp(-1))) < 1e-15, f"{k2!r}"))
    nu = OffspringDistribution.binary()
    xs = np.array([0.5, 1.0, math.sqrt(6), 5.0, 10.0])
    err = float(np.max(np.abs(exit_prob_1d(0.0, xs, nu) - 6 / (xs + math.sqrt(6)) ** 2)))
    out.append(("exit probability closed form", err < 1e-8, f"max error {err:.3g}"))
    u_bvp = solve_radial_bvp(0.0, 1.0, 1, 1.0).u0 * (1 + bvp_perturbation)
    u_fi = first_integral_1d(0.0, 1.0, 1.0)
    rel = abs(u_bvp - u_fi) / u_fi
    out.append(("BVP vs first integral", rel < bvp_tolerance, f"relative gap {rel:.3g}"))
    t = np.array([0.1, 1.0, 10.0])
    sol = vtg_semigroup(TestFunction("const", 2.0), t, 0.5, 1.0, 1)
    gap = float(np.max(np.abs(sol.values[:, 0] - vt_const(2.0, t, 0.5, 1.0))))
    out.append(("V_t g logistic closed form", gap < 1e-6, f"max error {gap:.3g}"))
    return out


def cmd_selftest(cfg, args) -> int:
    checks = selftest_checks(cfg["selftest.bvp_perturbation"], cfg["selftest.bvp_tolerance"])
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in checks) else 1


HANDLERS = {
    "field": cmd_field, "simulate": cmd_simulate, "hitprob": cmd_hitprob, "exitprob-oracle": cmd_exitprob,
    "bvp": cmd_bvp, "theorem1": cmd_theorem1, "corollary": cmd_corollary, "largedev": cmd_largedev,
    "mixing": cmd_mixing, "moments": cmd_moments, "selftest": cmd_selftest,
}

# convenience flags mapped onto config keys
SHORTCUTS = {"a": "exp.a", "R": "exp.R_list", "reps": "exp.replicates", "eps": "exp.eps_list",
             "b": "exp.b", "r": "exp.r_grid", "t": "exp.t_list", "seed": "sim.seed",
             "out": "output.dir", "env_seeds": "exp.env_seeds"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mildbbm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mildbbm {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("action", nargs="?", help="field: 'coverage' (the only action)")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--env-seeds", dest="env_seeds", help="comma list of environment master seeds")
    for name in ("a", "R", "reps", "eps", "b", "r", "t", "seed", "out"):
        p.add_argument(f"--{name}")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "run":
        argv = argv[1:]
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    for name, key in SHORTCUTS.items():
        v = getattr(args, name, None)
        if v is not None:
            overrides.append(f"{key}={v}")
    try:
        if args.command == "field" and args.action not in (None, "coverage"):
            raise ConfigError([f"field: unknown action {args.action!r} (expected 'coverage')"])
        if args.threads < 1:
            raise ConfigError(["--threads: must be >= 1"])
        cfg = RunConfig.load(args.config, overrides)
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        _error("invalid_config", exc.messages)
        return EXIT_CONFIG
    except OSError as exc:
        _error("invalid_config", [str(exc)])
        return EXIT_CONFIG
    except NumericalError as exc:
        _error("numerical_failure", [str(exc)])
        return EXIT_NUMERICAL


def _error(kind, messages):
    sys.stderr.write(json.dumps({"status": "error", "kind": kind, "messages": messages}) + "\n")
    for m in messages:
        sys.stderr.write(f"error: {m}\n")


if __name__ == "__main__":
    sys.exit(main())
