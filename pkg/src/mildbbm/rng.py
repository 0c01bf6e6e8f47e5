"""Counter-based random numbers keyed on integer tuples.

Every random quantity in the package is a pure function of a 64-bit key and
a counter, so an obstacle cell or a tree vertex can be re-sampled anywhere,
in any order, and on any thread with bit-identical results.  The mixing
function is SplitMix64 (Steele, Lea & Flood 2014).
"""
import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

# domain-separation tags for counters
TAG_CHILD = np.uint64(0x6C8E9CF570932BD5)
TAG_BRIDGE = np.uint64(0xA0761D6478BD642F)
TAG_NORMAL = np.uint64(0xE7037ED1A0B428DB)


@njit(cache=True, inline="always")
def splitmix64(x):
    z = x + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def hash2(a, b):
    return splitmix64(a ^ splitmix64(b))


@njit(cache=True, inline="always")
def uniform(key, counter):
    """Uniform on the open interval (0, 1)."""
    return (np.float64(hash2(key, counter) >> _S11) + 0.5) * _INV53


# Wichura (1988), algorithm AS 241 (PPND16): inverse normal CDF with about
# 1e-16 relative accuracy.  scipy.special.ndtri is not callable from numba.
_A = (3.387132872796366608, 133.14166789178437745, 1971.5909503065514427,
      13731.693765509461125, 45921.953931549871457, 67265.770927008700853,
      33430.575583588128105, 2509.0809287301226727)
_B = (1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077,
      21213.794301586595867, 39307.89580009271061, 28729.085735721942674,
      5226.495278852545925)
_C = (1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055,
      3.64784832476320460504, 1.27045825245236838258, 0.24178072517745061177,
      0.0227238449892691845833, 7.7454501427834140764e-4)
_D = (1.0, 2.05319162663775882187, 1.6763848301838038494, 0.68976733498510000455,
      0.14810397642748007459, 0.0151986665636164571966, 5.475938084995344946e-4,
      1.05075007164441684324e-9)
_E = (6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358,
      0.29656057182850489123, 0.026532189526576123093, 0.0012426609473880784386,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 0.59983220655588793769, 0.13692988092273580531, 0.0148753612908506148525,
      7.868691311456132591e-4, 1.8463183175100546818e-5, 1.4215117583164458887e-7,
      2.04426310338993978564e-15)


@njit(cache=True, inline="always")
def _poly8(c, x):
    return ((((((c[7] * x + c[6]) * x + c[5]) * x + c[4]) * x + c[3]) * x + c[2]) * x + c[1]) * x + c[0]


@njit(cache=True)
def ndtri(p):
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly8(_A, r) / _poly8(_B, r)
    r = p if q < 0.0 else 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly8(_C, r) / _poly8(_D, r)
    else:
        r -= 5.0
        val = _poly8(_E, r) / _poly8(_F, r)
    return -val if q < 0.0 else val


@njit(cache=True, inline="always")
def normal(key, counter):
    """Standard normal by inversion of one uniform."""
    return ndtri(uniform(key ^ TAG_NORMAL, counter))


@njit(cache=True)
def exponential(key, counter):
    return -np.log(uniform(key, counter))


def as_u64(x: int) -> np.uint64:
    """Reduce a Python int (possibly negative or huge) to a uint64 key."""
    return np.uint64(int(x) & MASK64)


def derive_key(*parts: int) -> int:
    """Fold integers into one 64-bit key, e.g. (experiment seed, replicate)."""
    key = np.uint64(0x243F6A8885A308D3)
    for p in parts:
        key = np.uint64(hash2(key, as_u64(p)))
    return int(key)
