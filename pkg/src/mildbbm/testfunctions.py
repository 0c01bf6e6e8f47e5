"""Test functions g (or h) with closed-form heat-semigroup action."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import ndtr

KINDS = ("const", "gauss", "halfline", "ball")


@dataclass(frozen=True)
class TestFunction:
    """g(x) = amplitude * shape(x), with shape one of

    const     1
    gauss     exp(-|x|^2 / (2 scale^2))
    halfline  1{x_1 >= 0}
    ball      1{|x| <= scale}
    """

    kind: str = "const"
    amplitude: float = 1.0
    scale: float = 1.0

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown test function kind {self.kind!r}; choose from {KINDS}")
        if not (self.amplitude >= 0 and math.isfinite(self.amplitude)):
            raise ValueError("amplitude must be finite and nonnegative")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def parse(cls, text: str) -> "TestFunction":
        """``"gauss:1.5"`` -> gauss of scale 1.5; ``"const"`` -> 1; ``"ball:2*0.5"`` -> 0.5 * 1{|x|<=2}."""
        kind, _, rest = text.strip().partition(":")
        amp, scale = 1.0, 1.0
        if rest:
            s, _, a = rest.partition("*")
            if kind == "const":
                amp = float(s)
            else:
                scale = float(s)
                if a:
                    amp = float(a)
        return cls(kind, amp, scale)

    def __str__(self) -> str:
        if self.kind == "const":
            return f"const:{self.amplitude!r}"
        return f"{self.kind}:{self.scale!r}*{self.amplitude!r}"

    @property
    def is_radial(self) -> bool:
        return self.kind != "halfline"

    @property
    def sup(self) -> float:
        return self.amplitude

    @property
    def far_value(self) -> float:
        """Limit of g at infinity (radial kinds only)."""
        return self.amplitude if self.kind == "const" else 0.0

    def __call__(self, x) -> np.ndarray:
        """Evaluate at points x of shape (..., d)."""
        x = np.asarray(x, dtype=np.float64)
        c, s = self.amplitude, self.scale
        if self.kind == "const":
            return np.full(x.shape[:-1], c)
        if self.kind == "gauss":
            return c * np.exp(-np.sum(x * x, axis=-1) / (2 * s * s))
        if self.kind == "halfline":
            return c * (x[..., 0] >= 0)
        return c * (np.sum(x * x, axis=-1) <= s * s)

    def radial(self, r, d: int) -> np.ndarray:
        """Evaluate a radial g at radius r."""
        if not self.is_radial:
            raise ValueError("halfline test function is not radial")
        r = np.asarray(r, dtype=np.float64)
        pts = np.zeros(r.shape + (d,))
        pts[..., 0] = r
        return self(pts)

    def heat(self, t: float, y) -> np.ndarray:
        """P_t g(y) = E g(y + B_t) for standard Brownian motion B."""
        y = np.asarray(y, dtype=np.float64)
        d = y.shape[-1]
        c, s = self.amplitude, self.scale
        if t <= 0:
            return self(y)
        if self.kind == "const":
            return np.full(y.shape[:-1], c)
        if self.kind == "gauss":
            v = s * s + t
            return c * (s * s / v) ** (d / 2) * np.exp(-np.sum(y * y, axis=-1) / (2 * v))
        if self.kind == "halfline":
            return c * ndtr(y[..., 0] / math.sqrt(t))
        if d == 1:
            sd = math.sqrt(t)
            return c * (ndtr((s - y[..., 0]) / sd) - ndtr((-s - y[..., 0]) / sd))
        nc = np.sum(y * y, axis=-1) / t
        out = np.where(nc > 0, stats.ncx2.cdf(s * s / t, d, np.maximum(nc, 1e-300)),
                       stats.chi2.cdf(s * s / t, d))
        return c * out
