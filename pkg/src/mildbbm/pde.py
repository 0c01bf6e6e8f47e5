"""Deterministic oracles: 1-D exit probabilities, the radial blow-up BVP and
the semilinear heat flow u_t = 1/2 Lap u - psi(u).

Throughout psi_a(u) = (sigma2/2) u^2 + a u.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, sparse
from scipy.linalg import solve_banded

from .offspring import OffspringDistribution
from .testfunctions import TestFunction


class NumericalError(RuntimeError):
    """A solver failed to reach its tolerance; the message carries diagnostics."""


@dataclass(frozen=True)
class BranchingMechanism:
    a: float
    sigma2: float

    def __post_init__(self):
        if not self.a >= 0:
            raise ValueError("killing parameter a must be >= 0")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be > 0")

    def __call__(self, u):
        return 0.5 * self.sigma2 * u * u + self.a * u


# -- Phi and its primitive -------------------------------------------------

def _check_unit(u):
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0) or np.any(u > 1) or np.any(np.isnan(u)):
        raise ValueError("argument must lie in [0, 1]")
    return u


def phi(u, nu: OffspringDistribution):
    """Phi(a) = Upsilon(1-a) - (1-a), Upsilon the offspring generating function."""
    u = _check_unit(u)
    c = nu.phi_coefficients()
    return u * u * np.polyval(c[:1:-1], u) if len(c) > 2 else np.zeros_like(u)


def gamma_int(u, nu: OffspringDistribution):
    """Gamma(u) = int_0^u Phi, integrated term by term."""
    u = _check_unit(u)
    return u**3 * _gamma_over_cube(u, nu.phi_coefficients())


def _gamma_over_cube(u, c):
    j = np.arange(2, len(c))
    coef = c[2:] / (j + 1)            # Gamma(u) = sum coef_j u^{j+1}
    return np.polyval(coef[::-1], u)


# -- exit probability in one dimension ------------------------------------

def exit_prob_1d(epsilon: float, x, nu: OffspringDistribution, tol: float = 1e-13):
    """Probability p_eps(x) that critical BBM with killing rate eps started
    at distance x from a wall ever reaches it.

    Solves int_p^1 du / sqrt(2 eps u^2 + 4 Gamma(u)) = x for p.  Writing
    u = e^w the integrand becomes (2 eps + 4 Gamma(u)/u^2)^(-1/2), smooth and
    bounded on (-inf, 0], so no endpoint singularity remains.
    """
    if not epsilon >= 0:
        raise ValueError("epsilon must be >= 0")
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if np.any(xs < 0) or not np.all(np.isfinite(xs)):
        raise ValueError("x must be finite and >= 0")
    c = nu.phi_coefficients()
    j = np.arange(2, len(c))
    coef = [float(v) for v in (c[2:] / (j + 1))[::-1]]    # Gamma(u) / u^3, highest power first

    def integrand(w):
        u = math.exp(w)
        q = 0.0
        for a in coef:
            q = q * u + a
        return 1.0 / math.sqrt(2 * epsilon + 4 * u * q)

    def span(lo, hi):
        val, err = integrate.quad(integrand, lo, hi, epsabs=tol, epsrel=tol, limit=400)
        if err > 1e3 * tol * max(1.0, abs(val)):
            raise NumericalError(f"quadrature did not converge on [{lo}, {hi}]: err {err:.3g}")
        return val

    # distance is additive in log p, so solve the sorted targets in sequence,
    # each one integrating only from the previous root
    out = np.empty_like(xs)
    L0, x0 = 0.0, 0.0
    for i in np.argsort(xs, kind="stable"):
        gap = xs[i] - x0
        if gap > 0:
            step = -1.0
            while span(L0 + step, L0) < gap:
                step *= 2
                if L0 + step < -1500:
                    raise NumericalError(f"exit probability for x={xs[i]} underflows")
            L0 = optimize.brentq(lambda L: span(L, L0) - gap, L0 + step, L0, xtol=1e-15, rtol=1e-15,
                                 maxiter=400)
            x0 = xs[i]
        out[i] = math.exp(L0)
    return out if np.ndim(x) else float(out[0])


# -- first-integral oracle for the 1-D blow-up problem ---------------------

def first_integral_1d(a: float, sigma2: float, R_A: float, tol: float = 1e-12) -> float:
    """u(0) for the solution of 1/2 u'' = psi_a(u) on (-R_A, R_A) with
    u = +inf at both ends.

    By symmetry u'(0) = 0, so u'^2 = 4 int_{u0}^u psi_a and
    R_A = int_0^inf ds / sqrt(Q(u0 + s^2)) after v = u0 + s^2, where
    (v - u0) Q(v) = int_{u0}^v psi_a.  The remaining integral is taken in
    s = sqrt(u0) sinh(tau) so that all scales are resolved.
    """
    if not R_A > 0:
        raise ValueError("R_A must be > 0")
    mech = BranchingMechanism(a, sigma2)

    def Q(v, u0):
        return mech.sigma2 / 6 * (v * v + v * u0 + u0 * u0) + mech.a / 2 * (v + u0)

    def half_width(logu0):
        u0 = math.exp(logu0)
        sc = math.sqrt(u0)

        def f(tau):
            s = sc * math.sinh(tau)
            return sc * math.cosh(tau) / math.sqrt(Q(u0 + s * s, u0))

        pts = []
        if a > 0:
            ta = math.asinh(math.sqrt(3 * a / sigma2) / sc)
            if 0 < ta < 80:
                pts.append(ta)
        val, err = integrate.quad(f, 0.0, 80.0, points=pts or None, epsabs=0.0, epsrel=tol,
                                  limit=500)
        return val

    lo, hi = -5.0, 5.0
    while half_width(lo) < R_A:
        lo -= 20
        if lo < -1400:
            raise NumericalError("first integral: u0 below floating point range")
    while half_width(hi) > R_A:
        hi += 20
        if hi > 1400:
            raise NumericalError("first integral: u0 above floating point range")
    L = optimize.brentq(lambda L: half_width(L) - R_A, lo, hi, xtol=1e-14, rtol=1e-15)
    return math.exp(L)


# -- radial blow-up BVP -----------------------------------------------------

def default_ladder(n_rungs: int = 11, lo: float = 1e1, hi: float = 1e6) -> list[float]:
    return list(np.geomspace(lo, hi, n_rungs))


@dataclass
class RadialSolution:
    dimension: int
    R_A: float
    a: float
    sigma2: float
    grid: np.ndarray
    values: np.ndarray
    boundary_ladder: list[tuple[float, float]]
    u0: float
    diagnostics: dict = field(default_factory=dict)

    def __call__(self, r):
        return np.interp(r, self.grid, self.values)


def _graded_mesh(R, delta, beta):
    top = R + delta
    n = max(int(math.ceil(math.log(top / delta) / -math.log1p(-beta))), 8)
    z = top * (delta / top) ** (np.arange(n + 1) / n)
    r = top - z
    r[0], r[-1] = 0.0, R
    return r


def _radial_operator(r, d):
    """Tridiagonal coefficients of 1/2 (u'' + (d-1)/r u') on interior nodes
    and the symmetric centre row, as (lower, diag, upper) arrays over nodes
    0..N-1 (node N carries the Dirichlet value)."""
    N = len(r) - 1
    lower, diag, upper = np.zeros(N), np.zeros(N), np.zeros(N)
    h1 = r[1] - r[0]
    diag[0] = -d / h1**2
    upper[0] = d / h1**2
    hm = r[1:N] - r[0:N - 1]
    hp = r[2:N + 1] - r[1:N]
    ri = r[1:N]
    s = hm + hp
    # u'' on a nonuniform mesh and the matching centred first derivative
    a2m, a2p = 2 / (hm * s), 2 / (hp * s)
    a1m, a1p = -hp / (hm * s), hm / (hp * s)
    lower[1:] = 0.5 * (a2m + (d - 1) / ri * a1m)
    upper[1:] = 0.5 * (a2p + (d - 1) / ri * a1p)
    diag[1:] = -lower[1:] - upper[1:]
    return lower, diag, upper


def _solve_rung(r, d, mech, n, guess, max_iter=100, rtol=1e-10):
    lower, diag, upper = _radial_operator(r, d)
    N = len(r) - 1
    u = guess[:N].copy()

    def residual(u):
        Lu = diag * u
        Lu[1:] += lower[1:] * u[:-1]
        Lu[:-1] += upper[:-1] * u[1:]
        Lu[-1] += upper[-1] * n
        return Lu - mech(u)

    F = residual(u)
    scale = max(n, 1.0)
    for it in range(max_iter):
        ab = np.zeros((3, N))
        ab[0, 1:] = upper[:-1]
        ab[1] = diag - (mech.sigma2 * u + mech.a)
        ab[2, :-1] = lower[1:]
        step = solve_banded((1, 1), ab, -F)
        fnorm = np.max(np.abs(F / (1 + np.abs(u))))
        lam = 1.0
        while True:
            trial = u + lam * step
            if np.all(trial > -1e-12 * scale):
                Ft = residual(trial)
                if np.max(np.abs(Ft / (1 + np.abs(trial)))) <= (1 - 1e-4 * lam) * fnorm or lam < 1e-3:
                    break
            lam *= 0.5
            if lam < 1e-8:
                raise NumericalError(f"Newton line search failed at rung n={n:g}, residual {fnorm:.3g}")
        u, F = trial, Ft
        if np.max(np.abs(lam * step) / (1 + np.abs(u))) < rtol:
            return np.append(u, n), it + 1
    raise NumericalError(f"Newton did not converge at rung n={n:g}: "
                         f"residual {np.max(np.abs(F)):.3g} after {max_iter} iterations")


def solve_radial_bvp(a: float, sigma2: float, d: int, R_A: float, ladder=None,
                     beta: float = 0.002, fit_rungs: int = 6, fit_degree: int = 3) -> RadialSolution:
    """Maximal radial solution of 1/2 Lap u = psi_a(u) in the ball B(0, R_A)
    with u = +inf on the sphere.

    Each rung n of the Dirichlet ladder solves the problem with boundary
    value n by damped Newton on a mesh graded geometrically toward the
    boundary (spacing ~ beta * (R_A - r + delta_n), delta_n the width of the
    boundary layer).  The rung values u_n(0) behave like a smooth function of
    s = n^(-1/2) (the boundary layer width), which is fitted by a polynomial
    and evaluated at s = 0.
    """
    mech = BranchingMechanism(a, sigma2)
    if int(d) < 1 or not R_A > 0:
        raise ValueError("need d >= 1 and R_A > 0")
    d = int(d)
    ladder = default_ladder() if ladder is None else [float(v) for v in ladder]
    if len(ladder) < 2 or any(b <= a_ for a_, b in zip(ladder, ladder[1:])) or ladder[0] <= 0:
        raise ValueError("ladder must be a strictly increasing list of positive boundary values")
    rungs = []
    sol = None
    for n in ladder:
        delta = math.sqrt(6 / (sigma2 * n))
        r = _graded_mesh(R_A, delta, beta)
        guess = np.minimum(6 / (sigma2 * (R_A + delta - r) ** 2), n)
        u, iters = _solve_rung(r, d, mech, n, guess)
        rungs.append((n, float(u[0]), iters, len(r)))
        sol = (r, u)
    u_n0 = np.array([v for _, v, _, _ in rungs])
    if np.any(np.diff(u_n0) <= 0):
        raise NumericalError(f"ladder values not strictly increasing: {u_n0}")
    k = min(fit_rungs, len(rungs))
    deg = min(fit_degree, k - 1)
    s = np.array([n for n, *_ in rungs[-k:]]) ** -0.5
    coef = np.polyfit(s, u_n0[-k:], deg)
    u0 = float(coef[-1])
    coef_lo = np.polyfit(s, u_n0[-k:], max(deg - 1, 0))
    diag = {
        "rung_iterations": [it for *_, it, _ in rungs],
        "rung_points": [m for *_, m in rungs],
        "fit_degree": deg,
        "fit_rungs": k,
        "fit_coefficients": [float(v) for v in coef],
        "extrapolation_change": float(u0 - u_n0[-1]),
        "degree_sensitivity": float(abs(u0 - coef_lo[-1])),
    }
    r, u = sol
    return RadialSolution(d, R_A, a, sigma2, r[:-1], u[:-1],
                          [(float(n), float(v)) for n, v, *_ in rungs], u0, diag)


def scaling_check(a: float, d: int = 1, kappa: float = 1.0, sigma2: float = 1.0,
                  R_A: float = 1.0, **bvp_kw) -> float:
    """Relative gap between u_{kappa a}(0) on B(0, R_A) and a * v(0), where v
    solves the same problem with killing kappa on B(0, sqrt(a) R_A)."""
    if not a > 0:
        raise ValueError("a must be > 0")
    u1 = solve_radial_bvp(kappa * a, sigma2, d, R_A, **bvp_kw).u0
    u2 = a * solve_radial_bvp(kappa, sigma2, d, math.sqrt(a) * R_A, **bvp_kw).u0
    return abs(u1 - u2) / abs(u1)


# -- semilinear heat flow V_t g ---------------------------------------------

def vt_const(c: float, t, a: float, sigma2: float):
    """V_t applied to the constant c: the Riccati / logistic closed form."""
    t = np.asarray(t, dtype=np.float64)
    if a == 0:
        return c / (1 + 0.5 * sigma2 * c * t)
    e = np.exp(-a * t)
    return a * c * e / (a + 0.5 * sigma2 * c * (-np.expm1(-a * t)))


@dataclass
class SemigroupSolution:
    grid: np.ndarray
    times: np.ndarray
    values: np.ndarray        # shape (len(times), len(grid))
    far_field_gap: float

    def at(self, t_index: int, r):
        return np.interp(r, self.grid, self.values[t_index])


def vtg_semigroup(g: TestFunction, t, a: float, sigma2: float, d: int,
                  R_inf: float | None = None, n_grid: int = 801,
                  rtol: float = 1e-11, atol: float = 1e-13, far_tol: float = 1e-12) -> SemigroupSolution:
    """Radial method-of-lines solution of u_t = 1/2 Lap u - psi_a(u), u_0 = g.

    Uses a uniform radial grid on [0, R_inf] with reflecting ends and the
    implicit Radau integrator.  The grid is truncated where u has relaxed to
    the spatially constant far-field flow; if u(R_inf) deviates from that
    flow by more than ``far_tol`` an error is raised.
    """
    mech = BranchingMechanism(a, sigma2)
    if not g.is_radial:
        raise ValueError("vtg_semigroup needs a radial test function")
    times = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("times must be nonnegative and sorted")
    T = float(times[-1])
    if R_inf is None:
        R_inf = g.scale + math.sqrt(2 * (g.scale**2 + T) * 32.0) + 1.0
    r = np.linspace(0.0, R_inf, n_grid)
    lower, diag, upper = _neumann_operator(r, d)
    L = sparse.diags([lower[1:], diag, upper[:-1]], [-1, 0, 1], format="csr")
    u0 = g.radial(r, d).astype(np.float64)

    def rhs(_, u):
        return L @ u - mech(u)

    def jac(_, u):
        return L - sparse.diags(sigma2 * u + a)

    if T == 0:
        vals = np.tile(u0, (len(times), 1))
    else:
        sol = integrate.solve_ivp(rhs, (0.0, T), u0, method="Radau", t_eval=times, jac=jac,
                                  rtol=rtol, atol=atol)
        if not sol.success:
            raise NumericalError(f"time integration failed: {sol.message}")
        vals = sol.y.T
    far = vt_const(g.far_value, times, a, sigma2)
    gap = float(np.max(np.abs(vals[:, -1] - far)))
    if gap > far_tol:
        raise NumericalError(f"truncation radius R_inf={R_inf:g} too small: far-field gap {gap:.3g}")
    return SemigroupSolution(r, times, vals, gap)


def _neumann_operator(r, d):
    N = len(r)
    h = r[1] - r[0]
    lower, diag, upper = np.zeros(N), np.zeros(N), np.zeros(N)
    diag[0], upper[0] = -d / h**2, d / h**2
    ri = r[1:-1]
    lower[1:-1] = 0.5 * (1 / h**2 - (d - 1) / (2 * h * ri))
    upper[1:-1] = 0.5 * (1 / h**2 + (d - 1) / (2 * h * ri))
    diag[1:-1] = -1 / h**2
    lower[-1], diag[-1] = 1 / h**2, -1 / h**2   # mirror ghost node, u'(R_inf) = 0
    return lower, diag, upper
