"""Critical branching Brownian motion killed inside obstacles.

Each vertex v of the genealogical tree owns a 64-bit key.  Its lifetime,
killing threshold, offspring count, Brownian increments and bridge
uniforms are all read from counter streams of that key, and a child's key
is a hash of its parent's key and its birth order.  Consequently a vertex's
path is a fixed function of (key, birth time, birth position): changing the
killing rate or the environment only truncates paths, never reshuffles them.
This is the coupling behind the monotonicity checks.

A vertex path lives on the grid birth + j*dt.  Extra breakpoints (natural
death, horizon, snapshot times, exact killing in homogeneous mode) are
filled in by Brownian-bridge interpolation between grid points, so grid
positions do not depend on where the breakpoints fall.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .obstacles import ObstacleField, covered, empty_params
from .offspring import OffspringDistribution
from .rng import TAG_CHILD, as_u64, hash2, normal, uniform
from .testfunctions import TestFunction

MODE_NONE, MODE_HOMOGENEOUS, MODE_OBSTACLES = 0, 1, 2
STOP_NONE, STOP_BALL, STOP_HALFSPACE = 0, 1, 2
STOP_KINDS = {"none": STOP_NONE, "ball": STOP_BALL, "halfspace": STOP_HALFSPACE}

FATE_DIED, FATE_KILLED, FATE_ABSORBED, FATE_CENSORED = 0, 1, 2, 3
_MAX_SUB = 64  # counter slots per grid step for breakpoint sub-intervals


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one branching run.

    epsilon       killing rate (inside obstacles, or everywhere in homogeneous mode)
    dt            Brownian grid step
    stop_domain   "none", "ball" (absorb on leaving B(0, R)) or "halfspace" (absorb once x_1 >= R)
    t_max         horizon; defaults to 64 R^2, or the last snapshot when there is no stop domain
    """

    epsilon: float = 0.0
    dt: float = 1e-3
    stop_domain: str = "ball"
    stop_radius: float = 1.0
    t_max: float | None = None
    initial_count: int = 1
    seed: int = 0
    bridge: bool = True
    substeps: int = 1
    snapshot_times: tuple[float, ...] = ()
    stop_on_hit: bool = True
    dimension: int = 1

    def __post_init__(self):
        object.__setattr__(self, "snapshot_times", tuple(float(s) for s in self.snapshot_times))
        if not self.epsilon >= 0 or not math.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite and >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.stop_domain not in STOP_KINDS:
            raise ValueError(f"stop_domain must be one of {sorted(STOP_KINDS)}")
        if self.stop_domain != "none" and not self.stop_radius >= 0:
            raise ValueError("stop_radius must be >= 0")
        if self.initial_count < 1:
            raise ValueError("initial_count must be >= 1")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.stop_domain == "none" and self.t_max is None and not self.snapshot_times:
            raise ValueError("stop_domain 'none' needs t_max or snapshot_times")
        if any(s < 0 for s in self.snapshot_times) or list(self.snapshot_times) != sorted(self.snapshot_times):
            raise ValueError("snapshot_times must be sorted and nonnegative")
        if self.snapshot_times and self.snapshot_times[-1] >= self.horizon:
            if self.t_max is not None or self.stop_domain != "none":
                raise ValueError("snapshot times must lie before t_max")

    @property
    def horizon(self) -> float:
        if self.t_max is not None:
            return float(self.t_max)
        if self.stop_domain == "none":
            return self.snapshot_times[-1] * (1 + 1e-12) + 1e-12
        return 64.0 * self.stop_radius**2

    def check_resolution(self, field: ObstacleField):
        """Obstacle geometry is resolved only if sqrt(dt) <= r0 / 4."""
        if math.sqrt(self.dt) > field.r0 / 4 * (1 + 1e-12):
            raise ValueError(f"sqrt(dt) = {math.sqrt(self.dt):.4g} exceeds r0/4 = {field.r0 / 4:.4g}")


@dataclass
class SimOutcome:
    hit: bool
    max_distance: float
    extinction_time: float       # nan when the run was stopped at the first hit
    censored: bool
    n_vertices: int
    snapshot_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    snapshots: list = field(default_factory=list)   # positions alive at each snapshot time


@dataclass
class BatchResult:
    """Per-replicate outcomes of a block of replicates."""

    hit: np.ndarray
    max_distance: np.ndarray
    extinction_time: np.ndarray
    censored: np.ndarray
    n_vertices: np.ndarray
    snapshot_counts: np.ndarray          # (replicates, n_snapshots)
    snap_positions: np.ndarray           # (m, d)
    snap_replicate: np.ndarray           # (m,)
    snap_index: np.ndarray               # (m,)
    first_replicate: int = 0

    @property
    def replicates(self) -> int:
        return len(self.hit)


@dataclass(frozen=True)
class HitEstimate:
    estimate: float
    se: float
    replicates: int
    hits: int
    censored: int
    seed: int


# -- kernel -----------------------------------------------------------------

@njit(cache=True, inline="always")
def _crossing_prob(W, a, b, h, d, stop_kind, R):
    """Probability that a Brownian bridge from W[a] to W[b] over time h
    leaves the stop domain, given that both endpoints are inside."""
    if stop_kind == STOP_HALFSPACE:
        return np.exp(-2.0 * (R - W[a, 0]) * (R - W[b, 0]) / h)
    if d == 1:
        p1 = np.exp(-2.0 * (R - W[a, 0]) * (R - W[b, 0]) / h)
        p2 = np.exp(-2.0 * (R + W[a, 0]) * (R + W[b, 0]) / h)
        return 1.0 - (1.0 - p1) * (1.0 - p2)
    ra = 0.0
    rb = 0.0
    for k in range(d):
        ra += W[a, k] * W[a, k]
        rb += W[b, k] * W[b, k]
    # tangent-plane approximation of the sphere
    return np.exp(-2.0 * (R - np.sqrt(ra)) * (R - np.sqrt(rb)) / h)


@njit(cache=True, inline="always")
def _outside(W, a, d, stop_kind, R):
    if stop_kind == STOP_HALFSPACE:
        return W[a, 0] >= R
    if stop_kind == STOP_BALL:
        s = 0.0
        for k in range(d):
            s += W[a, k] * W[a, k]
        return s >= R * R
    return False


@njit(cache=True)
def _grow(keys, births, pos, need):
    cap = keys.shape[0]
    if need <= cap:
        return keys, births, pos
    new = max(2 * cap, need)
    k2 = np.empty(new, np.uint64)
    b2 = np.empty(new)
    p2 = np.empty((new, pos.shape[1]))
    k2[:cap] = keys
    b2[:cap] = births
    p2[:cap] = pos
    return k2, b2, p2


ADV_REACHED, ADV_ABSORBED, ADV_KILLED = 0, 1, 2


# rows of the per-replicate work array
_X, _XG, _XR, _XS, _XM = 0, 1, 2, 3, 4


@njit(cache=True)
def _advance(W, cidx, b, j, sub, have_xr, ta, occ, maxr2, stop_at, thr, ks, kb, ki, d,
             obstacles, dt, sqdt, m_sub, stop_kind, R, bridge, fseed, mu, csz, r0, has_table,
             fdat, idat):
    """Move one vertex along its path from time ``ta`` to ``stop_at``.

    W[_X] is the current position, W[_XG] the grid point at birth + j*dt and,
    when ``have_xr`` is set, W[_XR] the next grid point.  Returns the status
    and the updated scalar state; W is updated in place.
    """
    while True:
        tgn = b + (j + 1) * dt
        if not have_xr:
            for k in range(d):
                W[_XR, k] = W[_XG, k] + sqdt * normal(ks, np.uint64(j * d + k))
            have_xr = True
            sub = 0
        if stop_at < tgn:
            s = stop_at
            w = (s - ta) / (tgn - ta)
            sd = np.sqrt((s - ta) * (tgn - s) / (tgn - ta))
            cnt = np.uint64(j * _MAX_SUB + min(sub, _MAX_SUB - 1)) * np.uint64(d)
            for k in range(d):
                W[_XS, k] = (W[_X, k] + w * (W[_XR, k] - W[_X, k])
                             + sd * normal(ki, cnt + np.uint64(k)))
        else:
            s = tgn
            for k in range(d):
                W[_XS, k] = W[_XR, k]
        h = s - ta
        status = ADV_REACHED
        r2 = 0.0
        if h > 0.0:
            if obstacles:
                inside = 0
                for i in range(m_sub):
                    f = (i + 0.5) / m_sub
                    for k in range(d):
                        W[_XM, k] = W[_X, k] + f * (W[_XS, k] - W[_X, k])
                    if covered(W, _XM, cidx, fseed, mu, csz, r0, has_table, fdat, idat):
                        inside += 1
                occ += h * inside / m_sub
            if stop_kind != STOP_NONE:
                crossed = _outside(W, _XS, d, stop_kind, R)
                if not crossed and bridge:
                    cnt = np.uint64(j * _MAX_SUB + min(sub, _MAX_SUB - 1))
                    if uniform(kb, cnt) < _crossing_prob(W, _X, _XS, h, d, stop_kind, R):
                        crossed = True
                if crossed:
                    status = ADV_ABSORBED
            for k in range(d):
                r2 += W[_XS, k] * W[_XS, k]
            if r2 > maxr2:
                maxr2 = r2
        if not np.isfinite(r2):
            raise ValueError("non-finite particle position")
        for k in range(d):
            W[_X, k] = W[_XS, k]
        ta = s
        sub += 1
        if status == ADV_REACHED and occ > thr:
            status = ADV_KILLED
        if s >= tgn:
            for k in range(d):
                W[_XG, k] = W[_XR, k]
            j += 1
            have_xr = False
        if status != ADV_REACHED or s >= stop_at:
            return status, j, sub, have_xr, ta, occ, maxr2


@njit(cache=True)
def _run_replicate(root_key, n_init, d, mode, eps, dt, m_sub, stop_kind, R, t_max, bridge,
                   stop_on_hit, snap_times, cdf, fp, snap_buf, snap_n):
    """Simulate one replicate depth first.  Snapshot positions are appended
    to ``snap_buf`` (rows: snapshot index, then d coordinates); returns the
    scalar outcome and the possibly reallocated buffer."""
    _, fseed, mu, csz, r0, has_table, fdat, idat = fp
    obstacles = mode == MODE_OBSTACLES and mu > 0.0 and eps > 0.0
    n_snap = snap_times.shape[0]
    counts = np.zeros(n_snap, np.int64)
    cap = 64 + 2 * n_init
    keys = np.empty(cap, np.uint64)
    births = np.empty(cap)
    pos = np.zeros((cap, d))
    top = 0
    for i in range(n_init - 1, -1, -1):
        keys[top] = hash2(root_key, np.uint64(i))
        births[top] = 0.0
        top += 1
    W = np.empty((5, d))
    cidx = np.empty(d, np.int64)
    sqdt = np.sqrt(dt)

    hit = False
    censored = False
    maxr2 = 0.0
    ext = 0.0
    nvert = 0
    while top > 0:
        top -= 1
        key = keys[top]
        b = births[top]
        for k in range(d):
            W[_X, k] = pos[top, k]
        nvert += 1
        t_nat = b - np.log(uniform(key, np.uint64(0)))
        gam = -np.log(uniform(key, np.uint64(1)))
        t_kill = np.inf
        thr = np.inf
        if eps > 0.0:
            if mode == MODE_HOMOGENEOUS:
                t_kill = b + gam / eps
            elif obstacles:
                thr = gam / eps
        t_end = min(t_nat, t_kill, t_max)
        fate = FATE_DIED
        if t_end == t_max and t_nat > t_max and t_kill > t_max:
            fate = FATE_CENSORED
        elif t_kill < t_nat:
            fate = FATE_KILLED

        r2 = 0.0
        for k in range(d):
            r2 += W[_X, k] * W[_X, k]
        maxr2 = max(maxr2, r2)
        if stop_kind != STOP_NONE and _outside(W, _X, d, stop_kind, R):
            hit = True
            maxr2 = max(maxr2, R * R)
            ext = max(ext, b)
            if stop_on_hit:
                return hit, np.sqrt(maxr2), np.nan, censored, nvert, counts, snap_buf, snap_n
            continue
        ks = hash2(key, np.uint64(11))
        kb = hash2(key, np.uint64(12))
        ki = hash2(key, np.uint64(13))
        # first snapshot not before birth
        si = 0
        while si < n_snap and snap_times[si] < b:
            si += 1
        for k in range(d):
            W[_XG, k] = W[_X, k]
        j = 0
        sub = 0
        have_xr = False
        ta = b
        occ = 0.0
        while True:
            stop_at = t_end
            is_snap = si < n_snap and snap_times[si] < t_end
            if is_snap:
                stop_at = snap_times[si]
            status = ADV_REACHED
            if stop_at > ta:
                status, j, sub, have_xr, ta, occ, maxr2 = _advance(
                    W, cidx, b, j, sub, have_xr, ta, occ, maxr2, stop_at, thr, ks, kb, ki, d,
                    obstacles, dt, sqdt, m_sub, stop_kind, R, bridge, fseed, mu, csz, r0,
                    has_table, fdat, idat)
            if status == ADV_ABSORBED:
                hit = True
                fate = FATE_ABSORBED
                maxr2 = max(maxr2, R * R)
                t_end = ta
                break
            if status == ADV_KILLED:
                fate = FATE_KILLED
                t_end = ta
                break
            if not is_snap:
                break
            counts[si] += 1
            if snap_n >= snap_buf.shape[0]:
                nb = np.empty((2 * snap_buf.shape[0] + 16, d + 1))
                nb[:snap_n] = snap_buf[:snap_n]
                snap_buf = nb
            snap_buf[snap_n, 0] = si
            for k in range(d):
                snap_buf[snap_n, k + 1] = W[_X, k]
            snap_n += 1
            si += 1

        if fate == FATE_ABSORBED and stop_on_hit:
            return hit, np.sqrt(maxr2), np.nan, censored, nvert, counts, snap_buf, snap_n
        ext = max(ext, t_end)
        if fate == FATE_CENSORED:
            censored = True
        elif fate == FATE_DIED:
            u = uniform(key, np.uint64(2))
            nk = 0
            while nk < cdf.shape[0] - 1 and u > cdf[nk]:
                nk += 1
            if nk > 0:
                if top + nk > keys.shape[0]:
                    keys, births, pos = _grow(keys, births, pos, top + nk)
                ckey = key ^ TAG_CHILD
                for i in range(nk - 1, -1, -1):
                    keys[top] = hash2(ckey, np.uint64(i))
                    births[top] = t_end
                    for k in range(d):
                        pos[top, k] = W[_X, k]
                    top += 1
    return hit, np.sqrt(maxr2), ext, censored, nvert, counts, snap_buf, snap_n


@njit(cache=True, nogil=True)
def _run_batch(seed, rep_lo, rep_hi, n_init, d, mode, eps, dt, m_sub, stop_kind, R, t_max,
               bridge, stop_on_hit, snap_times, cdf, fp):
    n = rep_hi - rep_lo
    hit = np.zeros(n, np.bool_)
    maxd = np.zeros(n)
    ext = np.zeros(n)
    cens = np.zeros(n, np.bool_)
    nv = np.zeros(n, np.int64)
    counts = np.zeros((n, snap_times.shape[0]), np.int64)
    buf = np.empty((16, d + 1))
    nbuf = 0
    reps = np.empty(16, np.int64)
    for i in range(n):
        root = hash2(seed, np.uint64(rep_lo + i))
        start = nbuf
        h, m, e, c, v, cts, buf, nbuf = _run_replicate(
            root, n_init, d, mode, eps, dt, m_sub, stop_kind, R, t_max, bridge, stop_on_hit,
            snap_times, cdf, fp, buf, nbuf)
        hit[i] = h
        maxd[i] = m
        ext[i] = e
        cens[i] = c
        nv[i] = v
        counts[i, :] = cts
        if nbuf > reps.shape[0]:
            r2 = np.empty(buf.shape[0], np.int64)
            r2[:reps.shape[0]] = reps
            reps = r2
        for k in range(start, nbuf):
            reps[k] = rep_lo + i
    return hit, maxd, ext, cens, nv, counts, buf[:nbuf].copy(), reps[:nbuf].copy()


# -- python front end -------------------------------------------------------

def _resolve_field(field, config: SimConfig):
    """Map the field argument to (mode, params tuple)."""
    d = config.dimension
    if field is None or (isinstance(field, str) and field == "none"):
        return MODE_NONE, empty_params(d)
    if isinstance(field, str) and field == "homogeneous":
        return MODE_HOMOGENEOUS, empty_params(d)
    if isinstance(field, ObstacleField):
        if field.dimension != d:
            raise ValueError(f"field dimension {field.dimension} != config dimension {d}")
        config.check_resolution(field)
        return MODE_OBSTACLES, field.params(_table_window(field, config))
    raise ValueError("field must be an ObstacleField, 'homogeneous' or 'none'")


def _table_window(field: ObstacleField, config: SimConfig):
    """Box of obstacles worth materializing for this run, or None."""
    if config.stop_domain == "none":
        reach = 6.0 * math.sqrt(config.horizon) + 4 * field.r0
    else:
        reach = config.stop_radius + 4 * field.r0
    lo = [-reach] * field.dimension
    hi = [reach] * field.dimension
    if config.stop_domain == "halfspace":
        lo[0] = -max(reach, 6.0 * math.sqrt(config.horizon))
    ncell = np.prod([(h - l) / field.cell_size + 3 for l, h in zip(lo, hi)])
    if ncell > 4e6:
        return None
    return (lo, hi)


def default_threads() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def run_batch(config: SimConfig, field, nu: OffspringDistribution, replicates: int,
              first_replicate: int = 0, threads: int = 1, chunk: int | None = None) -> BatchResult:
    """Run replicates ``first_replicate .. first_replicate + replicates - 1``.

    Replicate i is a pure function of (config.seed, i); chunks run on a
    thread pool and are concatenated in replicate order, so the result does
    not depend on ``threads``.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    mode, fp = _resolve_field(field, config)
    stop_kind = STOP_KINDS[config.stop_domain]
    snaps = np.asarray(config.snapshot_times, dtype=np.float64)
    cdf = nu.cdf.astype(np.float64)
    seed = as_u64(config.seed)
    threads = max(1, int(threads))
    if chunk is None:
        chunk = max(1, min(4096, -(-replicates // (4 * threads))))
    bounds = [(first_replicate + i, first_replicate + min(i + chunk, replicates))
              for i in range(0, replicates, chunk)]

    def work(lohi):
        lo, hi = lohi
        return _run_batch(seed, lo, hi, config.initial_count, config.dimension, mode,
                          float(config.epsilon), float(config.dt), int(config.substeps), stop_kind,
                          float(config.stop_radius), float(config.horizon), bool(config.bridge),
                          bool(config.stop_on_hit), snaps, cdf, fp)

    if threads == 1 or len(bounds) == 1:
        parts = [work(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    d = config.dimension
    buf = np.concatenate([p[6] for p in parts]) if parts else np.zeros((0, d + 1))
    return BatchResult(
        hit=np.concatenate([p[0] for p in parts]),
        max_distance=np.concatenate([p[1] for p in parts]),
        extinction_time=np.concatenate([p[2] for p in parts]),
        censored=np.concatenate([p[3] for p in parts]),
        n_vertices=np.concatenate([p[4] for p in parts]),
        snapshot_counts=np.concatenate([p[5] for p in parts]),
        snap_positions=buf[:, 1:],
        snap_replicate=np.concatenate([p[7] for p in parts]),
        snap_index=buf[:, 0].astype(np.int64),
        first_replicate=first_replicate,
    )


def simulate(config: SimConfig, field, nu: OffspringDistribution, replicate: int = 0) -> SimOutcome:
    """One realization of the branching system (replicate index ``replicate``)."""
    res = run_batch(config, field, nu, 1, first_replicate=replicate)
    snaps = [res.snap_positions[res.snap_index == i] for i in range(len(config.snapshot_times))]
    return SimOutcome(bool(res.hit[0]), float(res.max_distance[0]), float(res.extinction_time[0]),
                      bool(res.censored[0]), int(res.n_vertices[0]), res.snapshot_counts[0], snaps)


def hit_probability(config: SimConfig, field, nu: OffspringDistribution, replicates: int,
                    threads: int = 1, return_batch: bool = False):
    """Fraction of replicates in which some particle leaves the stop domain.

    Censored replicates count as no-hit and are reported.
    """
    if config.stop_domain == "none":
        raise ValueError("hit_probability needs a stop domain")
    res = run_batch(config, field, nu, replicates, threads=threads)
    k = int(res.hit.sum())
    p = k / replicates
    est = HitEstimate(p, math.sqrt(p * (1 - p) / replicates), replicates, k,
                      int((res.censored & ~res.hit).sum()), int(config.seed))
    return (est, res) if return_batch else est


def max_distance_sample(config: SimConfig, field, nu: OffspringDistribution, n_initial: int,
                        replicates: int, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Overall maximal distance |x| reached by any particle, per replicate,
    together with the censoring flags.  Runs to extinction (or the horizon)."""
    cfg = replace(config, initial_count=int(n_initial), stop_on_hit=False)
    res = run_batch(cfg, field, nu, replicates, threads=threads)
    return res.max_distance, res.censored


def empirical_cdf(sample, r) -> np.ndarray:
    s = np.sort(np.asarray(sample))
    return np.searchsorted(s, np.asarray(r, dtype=np.float64), side="right") / len(s)


# -- moment oracles and rescaling ----------------------------------------------

def moment_oracle_first(t: float, h: TestFunction, epsilon: float, mode: str, d: int = 1,
                        k: int = 1, x=None) -> float:
    """E_{k delta_x} <Z_t, h> for field mode "none" or "homogeneous"."""
    if mode == "obstacles":
        raise ValueError("no closed-form first moment in an obstacle field; compare two Monte Carlo runs")
    if mode not in ("none", "homogeneous"):
        raise ValueError(f"unknown field mode {mode!r}")
    y = np.zeros((1, d)) if x is None else np.asarray(x, dtype=np.float64).reshape(1, d)
    val = k * float(h.heat(t, y)[0])
    return val * math.exp(-epsilon * t) if mode == "homogeneous" else val


def rescale(batch: BatchResult, epsilon: float, phi: TestFunction, n_snapshots: int) -> np.ndarray:
    """<X^eps_t, phi> = eps * sum phi(sqrt(eps) x) over particles alive at
    real time t/eps, per replicate and snapshot: array (replicates, n_snapshots)."""
    out = np.zeros((batch.replicates, n_snapshots))
    if len(batch.snap_positions):
        vals = epsilon * phi(math.sqrt(epsilon) * batch.snap_positions)
        np.add.at(out, (batch.snap_replicate - batch.first_replicate, batch.snap_index), vals)
    return out
