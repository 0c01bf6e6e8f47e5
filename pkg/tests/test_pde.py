import math

import numpy as np
import pytest
from scipy.special import beta

from conftest import closed_form_exit
from mildbbm.pde import (NumericalError, exit_prob_1d, first_integral_1d, gamma_int, phi, scaling_check,
                         solve_radial_bvp, vt_const, vtg_semigroup)
from mildbbm.testfunctions import TestFunction

# I = int_1^inf dt / sqrt(t^3 - 1) = B(1/6, 1/2) / 3 (substitute t^3 = 1/x)
I_ORACLE = beta(1 / 6, 1 / 2) / 3
U0_ORACLE = 1.5 * I_ORACLE**2


def test_phi_domain(binary):
    with pytest.raises(ValueError):
        phi(1.5, binary)
    with pytest.raises(ValueError):
        gamma_int(-0.1, binary)


def test_exit_prob_closed_form(binary):
    x = np.array([0.0, 0.5, 1.0, math.sqrt(6), 5.0, 10.0])
    p = exit_prob_1d(0.0, x, binary)
    assert p[0] == 1.0
    assert np.max(np.abs(p - closed_form_exit(x))) < 1e-10
    assert abs(exit_prob_1d(0.0, math.sqrt(6), binary) - 0.25) < 1e-12
    with pytest.raises(ValueError):
        exit_prob_1d(0.0, -1.0, binary)


def test_exit_prob_monotone(geometric_type):
    x = np.linspace(0.1, 8, 25)
    rows = np.array([exit_prob_1d(e, x, geometric_type) for e in (0.0, 0.01, 0.1, 1.0)])
    assert np.all(np.diff(rows, axis=1) < 0)
    assert np.all(np.diff(rows, axis=0) <= 0)


def test_exit_prob_ode_residual(geometric_type):
    eps = 0.05
    h = 1e-2
    x = np.linspace(0.5, 6, 12)
    stencil = np.array([-2, -1, 0, 1, 2])
    p = exit_prob_1d(eps, (x[:, None] + h * stencil).ravel(), geometric_type).reshape(len(x), 5)
    pxx = (-p[:, 0] + 16 * p[:, 1] - 30 * p[:, 2] + 16 * p[:, 3] - p[:, 4]) / (12 * h * h)
    res = 0.5 * pxx - eps * p[:, 2] - phi(p[:, 2], geometric_type)
    assert np.max(np.abs(res)) < 1e-6


def test_first_integral_oracles():
    assert abs(first_integral_1d(0.0, 1.0, 1.0) / U0_ORACLE - 1) < 1e-10
    assert abs(first_integral_1d(0.0, 1.0, 3.0) * 9 / U0_ORACLE - 1) < 1e-10
    assert abs(first_integral_1d(0.0, 2.0, 1.0) * 2 / U0_ORACLE - 1) < 1e-10
    assert first_integral_1d(1.0, 1.0, 50.0) < 1e-4
    with pytest.raises(ValueError):
        first_integral_1d(0.0, 1.0, 0.0)


@pytest.mark.parametrize("a", [0.0, 0.5, 2.0])
def test_bvp_matches_first_integral(a):
    sol = solve_radial_bvp(a, 1.0, 1, 1.0)
    assert abs(sol.u0 / first_integral_1d(a, 1.0, 1.0) - 1) < 1e-4


def test_bvp_ladder_and_profile():
    sol = solve_radial_bvp(0.0, 1.0, 2, 1.0)
    u_n = [v for _, v in sol.boundary_ladder]
    assert np.all(np.diff(u_n) > 0)
    assert np.all(np.diff(sol.values) >= 0)
    # blow-up rate 6 / (sigma2 (R - r)^2); the last rung (boundary value n)
    # behaves like the blow-up profile of a ball wider by sqrt(6 / n)
    n = sol.boundary_ladder[-1][0]
    for gap in (0.02, 0.01, 0.005):
        assert abs(sol(1 - gap) * (gap + math.sqrt(6 / n)) ** 2 / 6 - 1) < 0.01
    with pytest.raises(ValueError):
        solve_radial_bvp(0.0, 1.0, 1, 1.0, ladder=[10, 5, 100])


def test_bvp_domain_continuity():
    vals = [solve_radial_bvp(1.0, 1.0, 2, 1.0 - dl).u0 for dl in (0.1, 0.05, 0.01, 0.0)]
    assert np.all(np.diff(vals) < 0)


def test_bvp_large_a_vanishes():
    assert solve_radial_bvp(1e3, 1.0, 1, 1.0).u0 < 1e-2 * solve_radial_bvp(0.0, 1.0, 1, 1.0).u0


def test_scaling_identity():
    assert scaling_check(1.0) < 1e-12
    assert scaling_check(4.0, d=1) < 1e-4
    assert scaling_check(0.25, d=2) < 1e-4


def test_vtg_closed_forms():
    t = [0.1, 1.0, 10.0]
    zero = vtg_semigroup(TestFunction("const", 0.0), t, 0.3, 1.0, 1)
    assert np.all(zero.values == 0)
    for a in (0.0, 0.7):
        sol = vtg_semigroup(TestFunction("const", 1.5), t, a, 2.0, 3)
        assert np.max(np.abs(sol.values - vt_const(1.5, t, a, 2.0)[:, None])) < 1e-6


def test_vtg_gauss_properties():
    g = TestFunction("gauss", 2.0, 0.7)
    sol = vtg_semigroup(g, np.linspace(0, 3, 7), 0.0, 1.0, 2)
    assert np.all(sol.values >= -1e-14)
    assert np.all(sol.values <= g.sup + 1e-12)
    assert np.all(np.diff(sol.values[:, 0]) <= 0)
    with pytest.raises(NumericalError):
        vtg_semigroup(g, [5.0], 0.0, 1.0, 1, R_inf=2.0)
