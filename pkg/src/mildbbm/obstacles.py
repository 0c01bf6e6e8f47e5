"""Quenched Poissonian field of ball-shaped obstacles.

The field lives on all of R^d and is never stored: space is cut into cubic
cells of side ``cell_size`` and the obstacles whose centers fall in a cell are
drawn from a counter-based stream keyed on ``(master_seed, cell index)``.
A membership query only touches the cells that meet the closed ball
``B(x, r0)``.  For hot loops a window of cells can be materialized into flat
arrays (``FieldTable``); lookups inside the window read the arrays, lookups
outside fall back to on-the-fly generation, and both paths give identical
answers.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from numba import njit

from .rng import as_u64, hash2, uniform

MAX_CELL_MEAN = 500.0


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


@dataclass(frozen=True)
class ShapeLaw:
    """Finite mixture of closed balls: radius atoms, their weights, and the
    Poisson intensity of obstacle centers (obstacles per unit volume)."""

    radii: tuple[float, ...]
    weights: tuple[float, ...]
    intensity: float

    def __post_init__(self):
        radii = tuple(float(r) for r in np.atleast_1d(self.radii))
        weights = tuple(float(w) for w in np.atleast_1d(self.weights))
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "weights", weights)
        if not radii or len(radii) != len(weights):
            raise ValueError("radii and weights must be non-empty and of equal length")
        if any(not (r > 0 and math.isfinite(r)) for r in radii):
            raise ValueError("all radii must be positive and finite")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if not (self.intensity >= 0 and math.isfinite(self.intensity)):
            raise ValueError("intensity must be a finite nonnegative number")

    @classmethod
    def single(cls, radius: float, intensity: float) -> "ShapeLaw":
        return cls((radius,), (1.0,), intensity)

    @property
    def r0(self) -> float:
        return max(self.radii)

    def mean_volume(self, d: int) -> float:
        w = unit_ball_volume(d)
        return sum(p * w * r**d for r, p in zip(self.radii, self.weights))


def kappa(shape_law: ShapeLaw, d: int) -> float:
    """Probability that a fixed point is covered: 1 - exp(-intensity * E[vol])."""
    return -math.expm1(-shape_law.intensity * shape_law.mean_volume(d))


def intensity_for_kappa(kappa_value: float, radius: float, d: int) -> float:
    """Intensity giving coverage ``kappa_value`` for single-radius balls."""
    if not 0 <= kappa_value < 1:
        raise ValueError("kappa must lie in [0, 1)")
    return -math.log1p(-kappa_value) / (unit_ball_volume(d) * radius**d)


@dataclass(frozen=True)
class FieldTable:
    lo: np.ndarray        # int64[d], smallest cell index in the window
    shape: np.ndarray     # int64[d], number of cells per axis
    offsets: np.ndarray   # int64[ncell + 1], CSR row pointers
    centers: np.ndarray   # float64[m, d]
    radii: np.ndarray     # float64[m]

    @property
    def n_obstacles(self) -> int:
        return int(self.radii.shape[0])


@dataclass(frozen=True)
class ObstacleField:
    shape_law: ShapeLaw
    dimension: int
    master_seed: int = 0
    cell_size: float | None = None
    _cache: dict = dc_field(default_factory=dict, compare=False, hash=False, repr=False)

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise ValueError("dimension must be >= 1")
        object.__setattr__(self, "dimension", int(self.dimension))
        cs = 2.0 * self.shape_law.r0 if self.cell_size is None else float(self.cell_size)
        if cs < 2.0 * self.shape_law.r0 * (1 - 1e-12):
            raise ValueError(f"cell_size {cs} must be >= 2*r0 = {2 * self.shape_law.r0}")
        object.__setattr__(self, "cell_size", cs)
        if self.cell_mean > MAX_CELL_MEAN:
            raise ValueError(
                f"expected {self.cell_mean:.1f} obstacles per cell; "
                f"use a smaller cell_size (limit {MAX_CELL_MEAN})")

    @property
    def r0(self) -> float:
        return self.shape_law.r0

    @property
    def kappa(self) -> float:
        return kappa(self.shape_law, self.dimension)

    @property
    def cell_mean(self) -> float:
        return self.shape_law.intensity * self.cell_size**self.dimension

    def with_seed(self, master_seed: int) -> "ObstacleField":
        return ObstacleField(self.shape_law, self.dimension, master_seed, self.cell_size)

    def to_config(self) -> dict:
        return {
            "dimension": self.dimension,
            "intensity": self.shape_law.intensity,
            "radii": list(self.shape_law.radii),
            "weights": list(self.shape_law.weights),
            "master_seed": self.master_seed,
            "cell_size": self.cell_size,
        }

    def params(self, window: tuple[Sequence[float], Sequence[float]] | None = None) -> tuple:
        """Packed description for the compiled kernels:
        (d, seed, cell mean, cell size, r0, has_table, fdat, idat).

        idat = [d, n_radii, n_obstacles, n_cells, lo (d), shape (d), offsets (n_cells + 1)]
        fdat = [radii, cumulative weights, table radii, table centers (row major)]
        """
        sl = self.shape_law
        cumw = np.cumsum(np.asarray(sl.weights, dtype=np.float64))
        cumw[-1] = 1.0
        tab = _EMPTY_TABLE(self.dimension) if window is None else self.table(window)
        ncell = len(tab.offsets) - 1
        idat = np.concatenate([[self.dimension, len(sl.radii), tab.n_obstacles, ncell],
                               tab.lo, tab.shape, tab.offsets]).astype(np.int64)
        fdat = np.concatenate([np.asarray(sl.radii, dtype=np.float64), cumw, tab.radii,
                               tab.centers.ravel()])
        return (self.dimension, as_u64(self.master_seed), float(self.cell_mean),
                float(self.cell_size), float(sl.r0), window is not None, fdat, idat)

    def table(self, window: tuple[Sequence[float], Sequence[float]]) -> FieldTable:
        """Materialize every obstacle that can touch the box ``window``."""
        lo_x = np.asarray(window[0], dtype=np.float64).reshape(self.dimension)
        hi_x = np.asarray(window[1], dtype=np.float64).reshape(self.dimension)
        lo = np.floor((lo_x - self.r0) / self.cell_size).astype(np.int64)
        hi = np.floor((hi_x + self.r0) / self.cell_size).astype(np.int64)
        key = (tuple(lo), tuple(hi))
        if key not in self._cache:
            shape = hi - lo + 1
            if np.prod(shape.astype(np.float64)) > 5e7:
                raise ValueError("materialized window too large")
            sl = self.shape_law
            cumw = np.cumsum(np.asarray(sl.weights, dtype=np.float64))
            cumw[-1] = 1.0
            offsets, centers, radii = _build_table(
                self.dimension, as_u64(self.master_seed), self.cell_mean, self.cell_size,
                np.asarray(sl.radii, dtype=np.float64), cumw, lo, shape)
            self._cache[key] = FieldTable(lo, shape, offsets, centers, radii)
        return self._cache[key]

    def cell_obstacles(self, cell: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Centers and radii of the obstacles whose centers lie in ``cell``."""
        sl = self.shape_law
        cumw = np.cumsum(np.asarray(sl.weights, dtype=np.float64))
        cumw[-1] = 1.0
        lo = np.asarray(cell, dtype=np.int64).reshape(self.dimension)
        offsets, centers, radii = _build_table(
            self.dimension, as_u64(self.master_seed), self.cell_mean, self.cell_size,
            np.asarray(sl.radii, dtype=np.float64), cumw, lo, np.ones(self.dimension, np.int64))
        return centers, radii


_EMPTY = {}


def _EMPTY_TABLE(d: int) -> FieldTable:
    if d not in _EMPTY:
        _EMPTY[d] = FieldTable(np.zeros(d, np.int64), np.zeros(d, np.int64),
                               np.zeros(1, np.int64), np.zeros((0, d)), np.zeros(0))
    return _EMPTY[d]


@functools.lru_cache(maxsize=None)
def empty_params(d: int) -> tuple:
    """Parameter tuple of an obstacle-free field, for kernels run without obstacles."""
    return ObstacleField(ShapeLaw.single(1.0, 0.0), d).params()


@njit(cache=True, inline="always")
def _zigzag(n):
    if n >= 0:
        return np.uint64(2 * n)
    return np.uint64(-2 * n - 1)


@njit(cache=True)
def _poisson(mu, u):
    if mu <= 0.0:
        return 0
    p = np.exp(-mu)
    cdf = p
    k = 0
    while u > cdf and k < 100000:
        k += 1
        p *= mu / k
        cdf += p
        if p < 1e-300 and k > mu:
            break
    return k


@njit(cache=True, inline="always")
def _pick_radius(radii, cumw, u):
    for j in range(radii.shape[0]):
        if u <= cumw[j]:
            return radii[j]
    return radii[radii.shape[0] - 1]


@njit(cache=True)
def _cell_hits_point(P, row, d, seed, mu, c, fdat, nr, cidx):
    """Sample the cell with integer index ``cidx`` and test P[row] against its balls."""
    key = seed
    for k in range(d):
        key = hash2(key, _zigzag(cidx[k]))
    n = _poisson(mu, uniform(key, np.uint64(0)))
    for i in range(n):
        base = np.uint64(1 + i * (d + 1))
        dist2 = 0.0
        for k in range(d):
            ck = (cidx[k] + uniform(key, base + np.uint64(k))) * c
            dist2 += (P[row, k] - ck) ** 2
        if nr == 1:
            r = fdat[0]
        else:
            r = _pick_radius(fdat[:nr], fdat[nr:2 * nr], uniform(key, base + np.uint64(d)))
        if dist2 <= r * r:
            return True
    return False


@njit(cache=True)
def _build_table(d, seed, mu, c, radii, cumw, lo, shape):
    ncell = 1
    for k in range(d):
        ncell *= shape[k]
    counts = np.zeros(ncell, np.int64)
    cidx = np.empty(d, np.int64)
    for lin in range(ncell):
        rem = lin
        key = seed
        for k in range(d - 1, -1, -1):
            cidx[k] = lo[k] + rem % shape[k]
            rem //= shape[k]
        for k in range(d):
            key = hash2(key, _zigzag(cidx[k]))
        counts[lin] = _poisson(mu, uniform(key, np.uint64(0)))
    offsets = np.zeros(ncell + 1, np.int64)
    for lin in range(ncell):
        offsets[lin + 1] = offsets[lin] + counts[lin]
    m = offsets[ncell]
    centers = np.empty((m, d))
    rads = np.empty(m)
    for lin in range(ncell):
        rem = lin
        key = seed
        for k in range(d - 1, -1, -1):
            cidx[k] = lo[k] + rem % shape[k]
            rem //= shape[k]
        for k in range(d):
            key = hash2(key, _zigzag(cidx[k]))
        for i in range(counts[lin]):
            j = offsets[lin] + i
            base = np.uint64(1 + i * (d + 1))
            for k in range(d):
                centers[j, k] = (cidx[k] + uniform(key, base + np.uint64(k))) * c
            if radii.shape[0] == 1:
                rads[j] = radii[0]
            else:
                rads[j] = _pick_radius(radii, cumw, uniform(key, base + np.uint64(d)))
    return offsets, centers, rads


@njit(cache=True, inline="always")
def covered(P, row, cidx, seed, mu, c, r0, has_table, fdat, idat):
    """Membership of the point P[row] in the field given by the packed
    ``params`` tuple.

    Cells meeting B(x, r0) are looked up in the materialized table when it
    covers them and sampled on the fly otherwise.  ``cidx`` is an int64 work
    array of length d.
    """
    if mu <= 0.0:
        return False
    d = idat[0]
    nr = idat[1]
    m = idat[2]
    o_lo = 4
    o_shape = 4 + d
    o_off = 4 + 2 * d
    o_rad = 2 * nr
    o_cen = 2 * nr + m
    found = False
    for b in range(1 << d):
        skip = False
        in_tab = has_table
        lin = 0
        for k in range(d):
            lo_k = np.int64(np.floor((P[row, k] - r0) / c))
            if (b >> k) & 1:
                hi_k = np.int64(np.floor((P[row, k] + r0) / c))
                if hi_k == lo_k:
                    skip = True
                    break
                cidx[k] = hi_k
            else:
                cidx[k] = lo_k
            off = cidx[k] - idat[o_lo + k]
            if off < 0 or off >= idat[o_shape + k]:
                in_tab = False
            else:
                lin = lin * idat[o_shape + k] + off
        if skip:
            continue
        if in_tab:
            for j in range(idat[o_off + lin], idat[o_off + lin + 1]):
                dist2 = 0.0
                for k in range(d):
                    dist2 += (P[row, k] - fdat[o_cen + j * d + k]) ** 2
                rj = fdat[o_rad + j]
                if dist2 <= rj * rj:
                    found = True
                    break
        elif _cell_hits_point(P, row, d, seed, mu, c, fdat, nr, cidx):
            found = True
        if found:
            break
    return found


@njit(cache=True)
def _contains_many(points, fp):
    n = points.shape[0]
    out = np.empty(n, np.bool_)
    d, seed, mu, c, r0, has_table, fdat, idat = fp
    cidx = np.empty(d, np.int64)
    for i in range(n):
        out[i] = covered(points, i, cidx, seed, mu, c, r0, has_table, fdat, idat)
    return out


def contains(field: ObstacleField, x) -> bool:
    """True iff x lies in some closed obstacle ball of ``field``."""
    x = np.asarray(x, dtype=np.float64).reshape(field.dimension)
    if not np.all(np.isfinite(x)):
        raise ValueError("query point must be finite")
    return bool(_contains_many(x.reshape(1, -1), field.params())[0])


def contains_many(field: ObstacleField, points, window=None) -> np.ndarray:
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, field.dimension)
    if not np.all(np.isfinite(pts)):
        raise ValueError("query points must be finite")
    return _contains_many(pts, field.params(window))


@dataclass(frozen=True)
class CoverageEstimate:
    estimate: float
    se: float
    n: int
    kappa_analytic: float


def empirical_coverage(field: ObstacleField, window, n: int, seed: int = 0) -> CoverageEstimate:
    """Fraction of ``n`` uniform points of the box ``window=(lo, hi)`` that
    are covered, with its binomial standard error.

    The binomial error is only honest when the window is large enough that
    the points rarely share an obstacle, i.e. volume >> n * E[ball volume].
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo = np.asarray(window[0], dtype=np.float64).reshape(field.dimension)
    hi = np.asarray(window[1], dtype=np.float64).reshape(field.dimension)
    if not np.all(hi > lo):
        raise ValueError(f"degenerate window {lo} .. {hi}")
    rng = np.random.default_rng(seed)
    pts = lo + (hi - lo) * rng.random((n, field.dimension))
    ncell = np.prod(np.floor((hi - lo) / field.cell_size) + 3)
    hits = contains_many(field, pts, window=(lo, hi) if ncell <= 2e6 else None)
    p = float(hits.mean())
    se = math.sqrt(p * (1 - p) / n)
    return CoverageEstimate(p, se, n, field.kappa)
