"""Monte Carlo estimates confronted with the deterministic oracles.

Each harness returns an ExperimentResult: a table of rows (one per
parameter cell) plus a summary of derived trend statistics.  Rows carry an
estimate, its standard error and an oracle value, or the marker
``bound-only`` in the ``oracle_kind`` column when only an inequality is
being checked.
"""
from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from . import __version__
from .branching import SimConfig, hit_probability, rescale, run_batch
from .obstacles import ObstacleField, _contains_many
from .offspring import OffspringDistribution
from .pde import solve_radial_bvp, vtg_semigroup
from .rng import derive_key
from .testfunctions import TestFunction


@dataclass
class ExperimentResult:
    name: str
    config: dict
    columns: list[str]
    rows: list[dict]
    seeds: dict
    summary: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def column(self, name, **where) -> np.ndarray:
        sel = [r for r in self.rows if all(r.get(k) == v for k, v in where.items())]
        return np.array([r[name] for r in sel])

    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r.get(c, "")) for c in self.columns])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "name": self.name,
            "version": __version__,
            "config": self.config,
            "config_hash": self.config_hash(),
            "master_seed": self.seeds.get("master_seed"),
            "seeds": self.seeds,
            "summary": self.summary,
            "rows": self.rows,
            "wall_time": self.wall_time,
        }
        return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"

    def write(self, outdir) -> tuple[str, str]:
        os.makedirs(outdir, exist_ok=True)
        p_csv = os.path.join(outdir, f"{self.name}.csv")
        p_json = os.path.join(outdir, f"{self.name}.summary.json")
        with open(p_csv, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv())
        with open(p_json, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_json())
        return p_csv, p_json


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# -- shared helpers ----------------------------------------------------------

def field_kappa(field_spec) -> float:
    """Effective killing multiplier: kappa of a field, 1 for homogeneous, 0 for none."""
    if isinstance(field_spec, ObstacleField):
        return field_spec.kappa
    if field_spec == "homogeneous":
        return 1.0
    if field_spec in (None, "none"):
        return 0.0
    raise ValueError("field must be an ObstacleField, 'homogeneous' or 'none'")


def field_echo(field_spec):
    return field_spec.to_config() if isinstance(field_spec, ObstacleField) else str(field_spec)


def _environments(field_spec, env_seeds):
    if isinstance(field_spec, ObstacleField):
        seeds = [field_spec.master_seed] if env_seeds is None else list(env_seeds)
        return [(s, field_spec.with_seed(s)) for s in seeds]
    return [("", field_spec)]


def _default_dt(field_spec, length_scale: float) -> float:
    if isinstance(field_spec, ObstacleField):
        return (field_spec.r0 / 4) ** 2
    return 1e-3 * length_scale**2


@functools.lru_cache(maxsize=256)
def blowup_value(a: float, sigma2: float, d: int, R_A: float = 1.0) -> float:
    """u_a(0) for the blow-up problem on B(0, R_A) (cached)."""
    return solve_radial_bvp(a, sigma2, d, R_A).u0


def clopper_pearson_upper(k: int, n: int, level: float = 0.95) -> float:
    """One-sided upper confidence bound for a binomial proportion."""
    if k >= n:
        return 1.0
    return float(stats.beta.ppf(level, k + 1, n - k))


def _per_row(values, n, what):
    if np.ndim(values) == 0:
        return [int(values)] * n
    if len(values) != n:
        raise ValueError(f"{what} must be a single count or one per row")
    return [int(v) for v in values]


# -- hitting probability of a large ball --------------------------------------

def theorem1(a: float, R_list, field_spec, nu: OffspringDistribution, replicates,
             dt: float | None = None, seed: int = 0, env_seeds=None, threads: int = 1,
             d: int | None = None) -> ExperimentResult:
    """R^2 P(hit complement of B(0,R)) at epsilon = a / R^2 against u_{kappa a}(0)
    on the unit ball.  The same replicate streams are used for every R."""
    t0 = time.time()
    d = field_spec.dimension if isinstance(field_spec, ObstacleField) else int(d or 1)
    R_list = [float(R) for R in R_list]
    reps = _per_row(replicates, len(R_list), "replicates")
    kap = field_kappa(field_spec)
    oracle = blowup_value(kap * a, nu.variance, d)
    rows = []
    for env, fld in _environments(field_spec, env_seeds):
        for R, n in zip(R_list, reps):
            eps = a / R**2
            cfg = SimConfig(epsilon=eps, dt=dt or _default_dt(fld, R), stop_domain="ball",
                            stop_radius=R, seed=seed, dimension=d)
            est = hit_probability(cfg, fld, nu, n, threads=threads)
            se = R**2 * est.se
            val = R**2 * est.estimate
            rows.append(dict(env_seed=env, R=R, epsilon=eps, dt=cfg.dt, replicates=n, hits=est.hits,
                             censored=est.censored, p_hat=est.estimate, p_se=est.se, estimate=val,
                             se=se, oracle=oracle, oracle_kind="u_(kappa a)(0)",
                             z=(val - oracle) / se if se > 0 else math.nan,
                             rel_err=abs(val - oracle) / oracle))
    z = np.array([r["z"] for r in rows])
    summary = {"kappa": kap, "sigma2": nu.variance, "oracle": oracle,
               "max_abs_z": float(np.nanmax(np.abs(z))) if len(z) else math.nan}
    if len(R_list) >= 2:
        for env, _ in _environments(field_spec, env_seeds):
            rel = [r["rel_err"] for r in rows if r["env_seed"] == env]
            zz = [r["z"] for r in rows if r["env_seed"] == env]
            summary[f"env {env}"] = {
                "rel_err": rel,
                "rel_err_decreasing": bool(np.all(np.diff(rel) < 0)),
                "z_slope_vs_logR": float(np.polyfit(np.log(R_list), zz, 1)[0]),
            }
    cols = ["env_seed", "R", "epsilon", "dt", "replicates", "hits", "censored", "p_hat", "p_se",
            "estimate", "se", "oracle", "oracle_kind", "z", "rel_err"]
    return ExperimentResult("theorem1", dict(a=a, R_list=R_list, replicates=reps, dt=dt, seed=seed,
                                             dimension=d, field=field_echo(field_spec),
                                             env_seeds=env_seeds, pmf=nu.as_mapping()),
                            cols, rows, {"master_seed": seed, "env_seeds": env_seeds},
                            summary, time.time() - t0)


def escape_cdf_oracle(b: float, r, kappa_value: float, sigma2: float, d: int) -> np.ndarray:
    """exp(-(b / r^2) u_{kappa r^2}(0)) with u on the unit ball."""
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    out = np.empty_like(r)
    for i, ri in enumerate(r):
        out[i] = math.exp(-(b / ri**2) * blowup_value(kappa_value * ri**2, sigma2, d))
    return out


def corollary_escape(b: float, eps_list, r_grid, field_spec, nu: OffspringDistribution,
                     replicates: int, dt: float | None = None, seed: int = 0, env_seeds=None,
                     threads: int = 1, d: int | None = None) -> ExperimentResult:
    """Law of sqrt(eps) * (maximal distance) for ceil(b / eps) initial particles.

    P(sqrt(eps) max <= r) is estimated as one minus the probability of
    hitting the complement of B(0, r / sqrt(eps)), each r with bridge
    crossing correction and the same replicate streams.
    """
    t0 = time.time()
    d = field_spec.dimension if isinstance(field_spec, ObstacleField) else int(d or 1)
    kap = field_kappa(field_spec)
    r_grid = [float(r) for r in r_grid]
    oracle = escape_cdf_oracle(b, r_grid, kap, nu.variance, d)
    rows = []
    for env, fld in _environments(field_spec, env_seeds):
        for eps in eps_list:
            n_init = int(math.ceil(b / eps - 1e-9))
            for r, orc in zip(r_grid, oracle):
                R = r / math.sqrt(eps)
                cfg = SimConfig(epsilon=eps, dt=dt or _default_dt(fld, R), stop_domain="ball",
                                stop_radius=R, initial_count=n_init, seed=seed, dimension=d)
                est = hit_probability(cfg, fld, nu, replicates, threads=threads)
                cdf = 1.0 - est.estimate
                rows.append(dict(env_seed=env, epsilon=eps, n_initial=n_init, r=r,
                                 replicates=replicates, censored=est.censored, estimate=cdf,
                                 se=est.se, oracle=float(orc), oracle_kind="exp(-(b/r^2)u_(kappa r^2)(0))",
                                 z=(cdf - orc) / est.se if est.se > 0 else math.nan))
    cols = ["env_seed", "epsilon", "n_initial", "r", "replicates", "censored", "estimate", "se",
            "oracle", "oracle_kind", "z"]
    return ExperimentResult("corollary", dict(b=b, eps_list=list(eps_list), r_grid=r_grid,
                                              replicates=replicates, dt=dt, seed=seed, dimension=d,
                                              field=field_echo(field_spec), env_seeds=env_seeds,
                                              pmf=nu.as_mapping()),
                            cols, rows, {"master_seed": seed, "env_seeds": env_seeds},
                            {"kappa": kap, "sigma2": nu.variance}, time.time() - t0)


def largedev(eps_R_pairs, field_spec, nu: OffspringDistribution, replicates,
             dt: float | None = None, seed: int = 0, env_seeds=None, threads: int = 1,
             homogeneous_control: bool = True) -> ExperimentResult:
    """Hitting probabilities in the regime eps R^2 >= 1.

    The homogeneous control run (rate eps everywhere, same replicate streams)
    kills every particle no later than the obstacle run does, so its hit
    indicator is pathwise dominated.
    """
    t0 = time.time()
    if not isinstance(field_spec, ObstacleField):
        raise ValueError("largedev needs an obstacle field")
    d = field_spec.dimension
    kap = field_kappa(field_spec)
    pairs = [(float(e), float(R)) for e, R in eps_R_pairs]
    if any(e * R * R < 1 - 1e-9 for e, R in pairs):
        raise ValueError("largedev needs eps * R^2 >= 1")
    reps = _per_row(replicates, len(pairs), "replicates")
    rows = []
    for env, fld in _environments(field_spec, env_seeds):
        for (eps, R), n in zip(pairs, reps):
            cfg = SimConfig(epsilon=eps, dt=dt or _default_dt(fld, R), stop_domain="ball",
                            stop_radius=R, seed=seed, dimension=d)
            est, res = hit_probability(cfg, fld, nu, n, threads=threads, return_batch=True)
            k = est.hits
            p = est.estimate
            row = dict(env_seed=env, epsilon=eps, R=R, eps_R2=eps * R * R, R_sqrt_eps=R * math.sqrt(eps),
                       replicates=n, hits=k, censored=est.censored, estimate=p, se=est.se,
                       p_upper95=clopper_pearson_upper(k, n),
                       log_p=math.log(p) if k > 0 else math.nan,
                       lower_bound_stat=(math.log(p) - math.log(eps) + R * math.sqrt(2 * eps))
                       if k > 0 else math.nan,
                       zero_hits=k == 0)
            if eps * R * R <= 1 + 1e-9:
                orc = blowup_value(kap * eps * R * R, nu.variance, d)
                row.update(oracle=orc / R**2, oracle_kind="u_(kappa eps R^2)(0)/R^2")
            else:
                row.update(oracle=math.nan, oracle_kind="bound-only")
            if homogeneous_control:
                hres = run_batch(cfg, "homogeneous", nu, n, threads=threads)
                row["homog_hits"] = int(hres.hit.sum())
                row["homog_estimate"] = float(hres.hit.mean())
                row["dominated"] = bool(np.all(res.hit >= hres.hit))
            rows.append(row)
    summary = {"kappa": kap, "sigma2": nu.variance}
    for env, _ in _environments(field_spec, env_seeds):
        sel = [r for r in rows if r["env_seed"] == env]
        ok = [r for r in sel if not r["zero_hits"]]
        info = {"zero_hit_rows": sum(r["zero_hits"] for r in sel)}
        if len(ok) >= 2:
            x = np.array([r["R_sqrt_eps"] for r in ok])
            y = np.array([r["log_p"] for r in ok])
            info["slope_logp_vs_R_sqrt_eps"] = float(np.polyfit(x, y, 1)[0])
            dec = -np.diff(y)
            info["log_p_decrements"] = dec.tolist()
            lb = np.array([r["lower_bound_stat"] for r in ok])
            info["lower_bound_stat_min"] = float(lb.min())
            info["lower_bound_stat_first"] = float(lb[0])
        if homogeneous_control:
            info["dominated"] = all(r["dominated"] for r in sel)
        summary[f"env {env}"] = info
    cols = ["env_seed", "epsilon", "R", "eps_R2", "R_sqrt_eps", "replicates", "hits", "censored",
            "estimate", "se", "p_upper95", "log_p", "lower_bound_stat", "zero_hits", "oracle",
            "oracle_kind"]
    if homogeneous_control:
        cols += ["homog_hits", "homog_estimate", "dominated"]
    return ExperimentResult("largedev", dict(eps_R_pairs=pairs, replicates=reps, dt=dt, seed=seed,
                                             field=field_echo(field_spec), env_seeds=env_seeds,
                                             pmf=nu.as_mapping()),
                            cols, rows, {"master_seed": seed, "env_seeds": env_seeds},
                            summary, time.time() - t0)


# -- spatial mixing of the rescaled obstacle set --------------------------------

def mixing_statistic(fld: ObstacleField, theta: float, g: TestFunction, eps: float, y,
                     spacing: float | None = None, width: float = 6.0) -> float:
    """E_y[(1_{Gamma^eps}(xi_theta) - kappa) g(xi_theta)] for one environment,
    Gamma^eps = sqrt(eps) * Gamma, by a midpoint rule against the Gaussian
    density on a grid of spacing <= r0 sqrt(eps) / 2."""
    d = fld.dimension
    y = np.asarray(y, dtype=np.float64).reshape(d)
    h = spacing or fld.r0 * math.sqrt(eps) / 2
    L = width * math.sqrt(theta)
    m = int(math.ceil(2 * L / h))
    axis = -L + (np.arange(m) + 0.5) * (2 * L / m)
    h = 2 * L / m
    w1 = np.exp(-axis**2 / (2 * theta)) / math.sqrt(2 * math.pi * theta) * h
    kap = fld.kappa
    se = math.sqrt(eps)
    lo = (y - L) / se
    hi = (y + L) / se
    total = 0.0
    # one slab of the grid at a time (first coordinate fixed)
    rest = np.stack(np.meshgrid(*([axis] * (d - 1)), indexing="ij"), -1).reshape(-1, d - 1) \
        if d > 1 else np.zeros((1, 0))
    wrest = np.prod(np.stack(np.meshgrid(*([w1] * (d - 1)), indexing="ij"), -1).reshape(-1, d - 1),
                    axis=1) if d > 1 else np.ones(1)
    fp = fld.params((lo, hi))
    if d == 1:
        pts = (y + axis)[:, None]
        ind = _contains_many(np.ascontiguousarray(pts / se), fp)
        return float(np.sum(w1 * (ind - kap) * g(pts)))
    for i, a in enumerate(axis):
        pts = np.empty((len(rest), d))
        pts[:, 0] = y[0] + a
        pts[:, 1:] = y[1:] + rest
        ind = _contains_many(pts / se, fp)
        total += w1[i] * np.sum(wrest * (ind - kap) * g(pts))
    return float(total)


def mixing_decay(theta: float, g: TestFunction, eps_list, n_fields: int, field_spec: ObstacleField,
                 y=None, seed: int = 0) -> ExperimentResult:
    """Mean over independent environments of the squared mixing statistic and
    its log-log slope against eps."""
    t0 = time.time()
    d = field_spec.dimension
    y = np.zeros(d) if y is None else np.asarray(y, dtype=np.float64)
    eps_list = sorted(float(e) for e in eps_list)
    rows = []
    env_seeds = [derive_key(seed, i) for i in range(n_fields)]
    for eps in eps_list:
        vals = np.array([mixing_statistic(field_spec.with_seed(s), theta, g, eps, y)
                         for s in env_seeds])
        sq = vals**2
        m = float(sq.mean())
        se = float(sq.std(ddof=1) / math.sqrt(n_fields)) if n_fields > 1 else math.nan
        rows.append(dict(epsilon=eps, n_fields=n_fields, estimate=m, se=se,
                         scaled=m / eps ** (d / 2), mean_statistic=float(vals.mean()),
                         oracle=math.nan, oracle_kind="bound-only"))
    e = np.array([r["epsilon"] for r in rows])
    v = np.array([r["estimate"] for r in rows])
    summary = {"expected_slope": d / 2}
    if len(rows) >= 2 and np.all(v > 0):
        slope, _ = np.polyfit(np.log(e), np.log(v), 1)
        summary["slope"] = float(slope)
    else:
        summary["slope"] = math.nan
    cols = ["epsilon", "n_fields", "estimate", "se", "scaled", "mean_statistic", "oracle", "oracle_kind"]
    return ExperimentResult("mixing", dict(theta=theta, g=str(g), eps_list=eps_list, n_fields=n_fields,
                                           y=y.tolist(), seed=seed, field=field_echo(field_spec)),
                            cols, rows, {"master_seed": seed, "env_seeds": env_seeds},
                            summary, time.time() - t0)


# -- moments of the rescaled particle measure --------------------------------------

def _heat_at_origin(f, u: float, d: int, nodes: int = 48) -> float:
    """E f(sqrt(u) Z) for Z standard normal in R^d by tensor Gauss-Hermite."""
    if u <= 0:
        return float(f(np.zeros((1, d)))[0])
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / math.sqrt(2 * math.pi)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    pts = np.stack(grids, -1).reshape(-1, d) * math.sqrt(u)
    ww = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), -1).reshape(-1, d), axis=1)
    return float(np.sum(ww * f(pts)))


def _squared_flow(g: TestFunction, t: float, u: float, d: int) -> float:
    """P_u[(P_{t-u} g)^2](0)."""
    if g.kind == "gauss":
        v = g.scale**2 + t - u
        A2 = g.amplitude**2 * (g.scale**2 / v) ** d
        return A2 * (0.5 * v / (0.5 * v + u)) ** (d / 2)
    if g.kind == "const":
        return g.amplitude**2
    return _heat_at_origin(lambda y: g.heat(t - u, y) ** 2, u, d)


def _heat_of_square(g: TestFunction, t: float, d: int) -> float:
    """P_t[g^2](0)."""
    if g.kind == "gauss":
        s2 = 0.5 * g.scale**2
        return g.amplitude**2 * (s2 / (s2 + t)) ** (d / 2)
    sq = TestFunction(g.kind, g.amplitude**2, g.scale)   # indicators and constants
    return float(sq.heat(t, np.zeros((1, d)))[0])


def moment_oracles(g: TestFunction, t: float, kappa_value: float, sigma2: float, d: int,
                   mass: float = 1.0, epsilon: float | None = None) -> dict:
    """First and second moments of <X_t, g> for X_0 = mass * delta_0.

    Super-Brownian motion with mechanism psi_kappa:
        mean = mass e^{-kappa t} P_t g(0)
        var  = mass sigma2 int_0^t e^{-kappa u} e^{-2 kappa (t-u)} P_u[(P_{t-u} g)^2](0) du
    With ``epsilon`` given, the exact values for the rescaled branching
    particle system with homogeneous killing are returned as well; they
    differ from the above by the single-particle term
    mass * eps * (e^{-kappa t} P_t g^2(0) - (e^{-kappa t} P_t g(0))^2).
    """
    y0 = np.zeros((1, d))
    m1 = math.exp(-kappa_value * t) * float(g.heat(t, y0)[0])
    integrand = lambda u: math.exp(-kappa_value * u - 2 * kappa_value * (t - u)) * _squared_flow(g, t, u, d)
    I, err = integrate.quad(integrand, 0.0, t, epsabs=1e-13, epsrel=1e-11, limit=200)
    out = {"mean": mass * m1, "var": mass * sigma2 * I}
    if epsilon is not None:
        single = math.exp(-kappa_value * t) * _heat_of_square(g, t, d) - m1**2
        out["var_exact"] = out["var"] + mass * epsilon * single
        out["mean_exact"] = out["mean"]
    return out


def _sample_stats(x: np.ndarray) -> dict:
    n = len(x)
    m = float(x.mean())
    v = float(x.var(ddof=1)) if n > 1 else math.nan
    m4 = float(np.mean((x - m) ** 4))
    se_v = math.sqrt(max(m4 - v * v, 0.0) / n) if n > 1 else math.nan
    lap = np.exp(-x)
    return {"mean": m, "mean_se": math.sqrt(v / n) if n > 1 else math.nan,
            "var": v, "var_se": se_v,
            "laplace": float(lap.mean()), "laplace_se": float(lap.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan}


def homogenization_moments(t_list, eps_list, field_spec, nu: OffspringDistribution, replicates: int,
                           g: TestFunction | None = None, dt: float | None = None, seed: int = 0,
                           env_seeds=None, threads: int = 1, control: bool = True,
                           control_dt: float = 1.0, laplace: bool = True,
                           env_rows: bool = True) -> ExperimentResult:
    """Mean, variance and Laplace functional of <X^eps_t, g> started from
    [1/eps] particles at the origin, against super-Brownian oracles.

    With several environments the obstacle rows are also pooled across
    them (rows with env_seed "pooled"); environment k uses replicates
    k*replicates .. (k+1)*replicates - 1, so pooled samples are independent.
    ``env_rows=False`` keeps only the pooled rows.  The control run replaces
    the field by homogeneous killing at rate kappa * eps and is compared with
    the exact moments of the particle system.
    """
    t0 = time.time()
    g = TestFunction("gauss", 1.0, 1.0) if g is None else g
    if not isinstance(field_spec, ObstacleField):
        raise ValueError("homogenization_moments needs an obstacle field (the control run is built in)")
    d = field_spec.dimension
    kap = field_spec.kappa
    s2 = nu.variance
    t_list = sorted(float(t) for t in t_list)
    lap_oracle = None
    if laplace and g.is_radial:
        sol = vtg_semigroup(g, t_list, kap, s2, d)
        lap_oracle = [float(v) for v in sol.values[:, 0]]   # V_t g(0)
    rows = []

    def emit(kind, env, eps, n_init, samples, exact):
        mass = eps * n_init
        for i, t in enumerate(t_list):
            st = _sample_stats(samples[:, i])
            orc = moment_oracles(g, t, kap, s2, d, mass, eps)
            checks = [("mean", orc["mean_exact"] if exact else orc["mean"], orc["mean"]),
                      ("var", orc["var_exact"] if exact else orc["var"], orc["var"])]
            if lap_oracle is not None:
                lv = math.exp(-mass * lap_oracle[i])
                checks.append(("laplace", math.nan if exact else lv, lv))
            for q, ref, sbm in checks:
                est, se = st[q], st[q + "_se"]
                ref_kind = ("exact particle moment" if exact else "super-BM") if math.isfinite(ref) else "bound-only"
                rows.append(dict(run=kind, env_seed=env, epsilon=eps, t=t, n_initial=n_init,
                                 replicates=samples.shape[0], quantity=q, estimate=est, se=se,
                                 oracle=ref, oracle_kind=ref_kind, sbm_oracle=sbm,
                                 z=(est - ref) / se if (se > 0 and math.isfinite(ref)) else math.nan,
                                 abs_err_sbm=abs(est - sbm)))

    envs = _environments(field_spec, env_seeds)
    for eps in eps_list:
        n_init = int(math.floor(1.0 / eps + 1e-9))
        snaps = tuple(t / eps for t in t_list)
        pooled = []
        for k, (env, fld) in enumerate(envs):
            cfg = SimConfig(epsilon=eps, dt=dt or _default_dt(fld, 1.0), stop_domain="none",
                            snapshot_times=snaps, initial_count=n_init, seed=seed, dimension=d)
            # disjoint replicate blocks, so that pooled samples are independent
            res = run_batch(cfg, fld, nu, replicates, first_replicate=k * replicates, threads=threads)
            x = rescale(res, eps, g, len(t_list))
            pooled.append(x)
            if env_rows or len(envs) == 1:
                emit("obstacles", env, eps, n_init, x, False)
        if len(envs) > 1:
            emit("obstacles", "pooled", eps, n_init, np.concatenate(pooled), False)
        if control:
            cfg = SimConfig(epsilon=kap * eps, dt=control_dt, stop_domain="none", snapshot_times=snaps,
                            initial_count=n_init, seed=seed, dimension=d)
            res = run_batch(cfg, "homogeneous", nu, replicates * max(1, len(envs)), threads=threads)
            emit("control", "", eps, n_init, rescale(res, eps, g, len(t_list)), True)

    summary = {"kappa": kap, "sigma2": s2, "g": str(g)}
    ctrl = [r for r in rows if r["run"] == "control" and math.isfinite(r["z"])]
    if ctrl:
        summary["control_max_abs_z"] = float(max(abs(r["z"]) for r in ctrl))
    tag = "pooled" if len(envs) > 1 else envs[0][0]
    for t in t_list:
        errs = [r["abs_err_sbm"] for r in rows
                if r["run"] == "obstacles" and r["env_seed"] == tag and r["t"] == t and r["quantity"] == "mean"]
        summary[f"mean_abs_err t={t!r}"] = errs
    cols = ["run", "env_seed", "epsilon", "t", "n_initial", "replicates", "quantity", "estimate", "se",
            "oracle", "oracle_kind", "sbm_oracle", "z", "abs_err_sbm"]
    return ExperimentResult("moments", dict(t_list=t_list, eps_list=list(eps_list), replicates=replicates,
                                            g=str(g), dt=dt, control_dt=control_dt, seed=seed,
                                            field=field_echo(field_spec), env_seeds=env_seeds,
                                            env_rows=env_rows, pmf=nu.as_mapping()),
                            cols, rows, {"master_seed": seed, "env_seeds": env_seeds},
                            summary, time.time() - t0)
