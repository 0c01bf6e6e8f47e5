import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from mildbbm.experiments import (ExperimentResult, blowup_value, clopper_pearson_upper, corollary_escape,
                                 escape_cdf_oracle, field_kappa, homogenization_moments, largedev,
                                 mixing_decay, mixing_statistic, moment_oracles, theorem1)
from mildbbm.obstacles import ObstacleField, ShapeLaw, intensity_for_kappa
from mildbbm.offspring import OffspringDistribution
from mildbbm.pde import solve_radial_bvp
from mildbbm.testfunctions import TestFunction


@pytest.fixture
def field1():
    return ObstacleField(ShapeLaw.single(1.0, intensity_for_kappa(0.5, 1.0, 1)), 1, master_seed=0)


def test_field_kappa(field1):
    assert field_kappa("none") == 0.0
    assert field_kappa("homogeneous") == 1.0
    assert abs(field_kappa(field1) - 0.5) < 1e-14


def test_clopper_pearson():
    # zero successes: 1 - 0.05**(1/n)
    assert abs(clopper_pearson_upper(0, 100) - (1 - 0.05 ** (1 / 100))) < 1e-12
    up = clopper_pearson_upper(7, 200)
    assert abs(stats.binom.cdf(7, 200, up) - 0.05) < 1e-9


def test_blowup_value_is_solver_value():
    assert blowup_value(0.5, 1.5, 1) == solve_radial_bvp(0.5, 1.5, 1, 1.0).u0


def test_escape_oracle_limits():
    r = np.array([0.3, 1.0, 3.0, 30.0])
    F = escape_cdf_oracle(1.0, r, 0.5, 1.0, 1)
    assert np.all(np.diff(F) > 0) and F[-1] > 0.99 and F[0] < 1e-10
    # kappa = 0, d = 1: u_0(0) = 6/sigma2 * (2 I)^2 / 4 with I = B(1/6, 1/2)/3 on the unit interval
    I = integrate.quad(lambda v: (v**3 - 1) ** -0.5 if v > 1 else 0.0, 1, np.inf)[0]
    u0 = 1.5 * I**2
    assert abs(escape_cdf_oracle(2.0, [1.0], 0.0, 1.0, 1)[0] - math.exp(-2 * u0)) < 1e-4


def test_moment_oracles_constant_g():
    k, s2, t, c = 0.5, 1.5, 2.0, 2.0
    mo = moment_oracles(TestFunction("const", c), t, k, s2, 1)
    assert abs(mo["mean"] - c * math.exp(-k * t)) < 1e-12
    var = s2 * c**2 * math.exp(-2 * k * t) * (math.exp(k * t) - 1) / k
    assert abs(mo["var"] - var) < 1e-8 * var
    mo0 = moment_oracles(TestFunction("const", c), t, 0.0, s2, 1)
    assert abs(mo0["var"] - s2 * c**2 * t) < 1e-8


def test_moment_oracles_gauss_against_quadrature():
    # P_t g(0) for g = exp(-|x|^2/(2 w^2)) in d = 2 is w^2/(w^2+t)
    g = TestFunction("gauss", 1.0, 1.5)
    mo = moment_oracles(g, 1.0, 0.0, 1.0, 2)
    assert abs(mo["mean"] - 2.25 / 3.25) < 1e-10

    def inner(u):   # P_u[(P_{t-u} g)^2](0): (P_s g)^2 is a gaussian of variance (w^2+s)/2 and height (w^2/(w^2+s))^2
        s = 1.0 - u
        v = (2.25 + s) / 2
        return (2.25 / (2.25 + s)) ** 2 * v / (v + u)
    ref = integrate.quad(inner, 0, 1)[0]
    assert abs(mo["var"] - ref) < 1e-7


def test_moment_oracles_exact_particle_moments():
    g = TestFunction("const", 1.0)
    eps, t, k, s2 = 0.05, 1.0, 0.4, 1.0
    mass = eps * math.floor(1 / eps)
    mo = moment_oracles(g, t, k, s2, 1, mass=mass, epsilon=eps)
    # each particle line survives with prob e^{-kt}; total is a compound critical GW count
    m = math.exp(-k * t)
    assert abs(mo["mean_exact"] - mass * m) < 1e-12
    assert mo["var_exact"] > mo["var"]


def _check_csv(res: ExperimentResult):
    text = res.to_csv()
    assert "\r" not in text and text.endswith("\n")
    lines = text.splitlines()
    assert lines[0].split(",") == res.columns and len(lines) == len(res.rows) + 1
    doc = json.loads(res.to_json())
    assert doc["config_hash"] == res.config_hash()


def test_theorem1_small_run_and_determinism(field1):
    nu = OffspringDistribution.binary()
    a = theorem1(1.0, [4.0, 6.0], field1, nu, 300, seed=2)
    b = theorem1(1.0, [4.0, 6.0], field1, nu, 300, seed=2, threads=2)
    _check_csv(a)
    assert a.to_csv() == b.to_csv()
    assert [r["R"] for r in a.rows] == [4.0, 6.0]
    assert all(abs(r["epsilon"] - 1 / r["R"] ** 2) < 1e-15 for r in a.rows)
    assert a.rows[0]["oracle"] == blowup_value(0.5, 1.0, 1)


def test_theorem1_without_field_uses_unkilled_oracle():
    res = theorem1(1.0, [5.0], "none", OffspringDistribution.binary(), 10)
    assert res.rows[0]["oracle"] == blowup_value(0.0, 1.0, 1)


def test_corollary_small_run():
    nu = OffspringDistribution.binary()
    res = corollary_escape(1.0, [0.04], [1.0, 2.0, 4.0], "homogeneous", nu, 300, seed=1)
    _check_csv(res)
    est = res.column("estimate")
    assert np.all(np.diff(est) >= 0)
    assert res.rows[0]["n_initial"] == 25


def test_largedev_small_run(field1):
    nu = OffspringDistribution.binary()
    res = largedev([(1 / 100, 10.0), (16 / 100, 10.0)], field1, nu, 400, seed=3)
    _check_csv(res)
    rows = res.rows
    assert all(r["dominated"] for r in rows)
    assert rows[1]["hits"] <= rows[0]["hits"]
    for r in rows:
        assert r["p_upper95"] >= r["estimate"]
        if r["zero_hits"]:
            assert r["oracle_kind"] == "bound-only" or r["eps_R2"] <= 1
    with pytest.raises(ValueError):
        largedev([(0.5 / 100, 10.0)], field1, nu, 10)


def test_mixing_statistic_centered(field1):
    g = TestFunction("gauss", 1.0, 1.0)
    vals = [mixing_statistic(field1.with_seed(s), 1.0, g, 0.01, [0.0]) for s in range(40)]
    assert abs(np.mean(vals)) < 3 * np.std(vals) / math.sqrt(40) + 1e-3


def test_mixing_decay_small(field1):
    res = mixing_decay(1.0, TestFunction("gauss", 1.0, 1.0), [1e-2, 1e-3], 20, field1, seed=1)
    _check_csv(res)
    assert res.summary["expected_slope"] == 0.5
    assert np.isfinite(res.summary["slope"])


def test_homogenization_moments_control(field1):
    nu = OffspringDistribution.from_mapping({0: 0.25, 1: 0.5, 2: 0.25})
    res = homogenization_moments([1.0], [0.05], field1, nu, 400, seed=4, dt=1 / 16)
    _check_csv(res)
    ctrl = [r for r in res.rows if r["run"] == "control" and r["quantity"] in ("mean", "var")]
    assert ctrl and all(abs(r["z"]) < 4 for r in ctrl)


def test_write_files(tmp_path, field1):
    res = theorem1(1.0, [4.0], field1, OffspringDistribution.binary(), 50, seed=2)
    csv_path, js_path = res.write(tmp_path)
    assert open(csv_path, encoding="utf-8").read() == res.to_csv()
    assert json.load(open(js_path))["summary"] == json.loads(res.to_json())["summary"]
