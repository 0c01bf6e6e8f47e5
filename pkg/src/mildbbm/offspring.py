"""Critical offspring laws and the polynomials derived from them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import comb


@dataclass(frozen=True)
class OffspringDistribution:
    """Critical offspring law on {0, 1, ..., K}.

    ``probs[k]`` is the probability of k children.  The law must have mean 1
    and positive variance; the degenerate law {1: 1} is rejected.
    """

    probs: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(v) for v in self.probs)
        while len(p) > 1 and p[-1] == 0.0:
            p = p[:-1]
        object.__setattr__(self, "probs", p)
        arr = np.asarray(p)
        if arr.size == 0 or np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError("offspring probabilities must be finite and nonnegative")
        if abs(arr.sum() - 1.0) > 1e-12:
            raise ValueError(f"offspring probabilities sum to {arr.sum()!r}, not 1")
        if abs(self.mean - 1.0) > 1e-12:
            raise ValueError(f"offspring law must be critical (mean 1), got mean {self.mean!r}")
        if not self.variance > 1e-14:
            raise ValueError("offspring law must have sigma^2 > 0; the law {1: 1} is degenerate")

    @classmethod
    def from_mapping(cls, pmf: Mapping[int, float]) -> "OffspringDistribution":
        if any(int(k) != k or k < 0 for k in pmf):
            raise ValueError("offspring counts must be nonnegative integers")
        kmax = max(int(k) for k in pmf)
        probs = [0.0] * (kmax + 1)
        for k, v in pmf.items():
            probs[int(k)] += float(v)
        return cls(tuple(probs))

    @classmethod
    def binary(cls) -> "OffspringDistribution":
        return cls((0.5, 0.0, 0.5))

    def as_mapping(self) -> dict[int, float]:
        return {k: v for k, v in enumerate(self.probs) if v > 0}

    @property
    def mean(self) -> float:
        return float(sum(k * v for k, v in enumerate(self.probs)))

    @property
    def variance(self) -> float:
        m = self.mean
        return float(sum((k - m) ** 2 * v for k, v in enumerate(self.probs)))

    @property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c

    def pgf(self, s):
        return np.polyval(self.probs[::-1], s)

    def phi_coefficients(self) -> np.ndarray:
        """Coefficients c_j of Phi(a) = sum_k p_k (1-a)^k - 1 + a in powers of a.

        Computed exactly from binomial sums; c_0 and c_1 vanish by
        normalisation and criticality and are set to zero.
        """
        K = len(self.probs) - 1
        c = np.zeros(K + 1)
        for j in range(K + 1):
            c[j] = (-1) ** j * sum(self.probs[k] * comb(k, j, exact=True) for k in range(j, K + 1))
        c[0] = 0.0
        c[1] = 0.0
        return c

    def sample(self, u: float) -> int:
        return int(np.searchsorted(self.cdf, u, side="left"))


def pmf_from_string(text: str) -> OffspringDistribution:
    """Parse ``"0:0.5,2:0.5"`` (or ``"{0: 0.5, 2: 0.5}"``) into a law."""
    body = text.strip().strip("{}")
    pmf: dict[int, float] = {}
    for part in body.split(","):
        if not part.strip():
            continue
        k, v = part.split(":")
        kk = float(k)
        if kk != int(kk):
            raise ValueError(f"non-integer offspring count {k!r}")
        pmf[int(kk)] = pmf.get(int(kk), 0.0) + float(v)
    if not pmf:
        raise ValueError("empty offspring law")
    return OffspringDistribution.from_mapping(pmf)

