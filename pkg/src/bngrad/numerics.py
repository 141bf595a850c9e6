"""Batch statistics, Gaussian special functions, and seeded sampling.

A "batch" throughout this package is a plain 2-D float64 ndarray with
rows = samples and columns = features.  Batch statistics are population
statistics over the rows (variance divides by the batch size, not m-1).
"""

import math

import numpy as np

SQRT_2PI = math.sqrt(2.0 * math.pi)
INV_SQRT_2PI = 1.0 / SQRT_2PI


def as_batch(x, min_rows=1):
    """Validate and return x as a 2-D float64 batch (rows = samples)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"batch must be 2-D (samples, features), got shape {x.shape}")
    if x.shape[0] < min_rows:
        raise ValueError(f"batch needs at least {min_rows} rows, got {x.shape[0]}")
    return x


def batch_mean(x):
    """Per-feature mean across the batch."""
    return as_batch(x).mean(axis=0)


def batch_var(x):
    """Per-feature population variance (divide by m) across the batch.

    Raises ValueError for fewer than 2 rows: a single sample has no
    batch variance to normalize by.
    """
    x = as_batch(x)
    if x.shape[0] < 2:
        raise ValueError("batch variance undefined for fewer than 2 samples")
    return x.var(axis=0)


def normal_pdf(z):
    """Standard normal density, elementwise on arrays."""
    z = np.asarray(z, dtype=np.float64)
    out = INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return float(out) if out.ndim == 0 else out


def normal_cdf(z):
    """Standard normal distribution function via erfc (abs err < 1e-15)."""
    if np.ndim(z) == 0:
        return 0.5 * math.erfc(-float(z) / math.sqrt(2.0))
    z = np.asarray(z, dtype=np.float64)
    return np.array([0.5 * math.erfc(-v / math.sqrt(2.0)) for v in z.ravel()]).reshape(z.shape)


def p_of_a(a):
    """Signed integral of the standard normal density from 0 to a.

    Equals normal_cdf(a) - 0.5; odd in a by construction (erf is odd),
    bounded by +/- 0.5.
    """
    if np.ndim(a) == 0:
        return 0.5 * math.erf(float(a) / math.sqrt(2.0))
    a = np.asarray(a, dtype=np.float64)
    return np.array([0.5 * math.erf(v / math.sqrt(2.0)) for v in a.ravel()]).reshape(a.shape)


def adaptive_simpson(f, lo, hi, tol=1e-8, max_depth=40):
    """Adaptive Simpson quadrature of a scalar function on [lo, hi]."""
    if hi <= lo:
        return 0.0

    def simpson(a, fa, b, fb):
        m = 0.5 * (a + b)
        fm = f(m)
        return m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, fa, b, fb, m, fm, whole, eps, depth):
        lm, flm, left = simpson(a, fa, m, fm)
        rm, frm, right = simpson(m, fm, b, fb)
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        half = 0.5 * eps
        return (recurse(a, fa, m, fm, lm, flm, left, half, depth + 1)
                + recurse(m, fm, b, fb, rm, frm, right, half, depth + 1))

    fa, fb = f(lo), f(hi)
    m, fm, whole = simpson(lo, fa, hi, fb)
    return recurse(lo, fa, hi, fb, m, fm, whole, tol, 0)


class SeededRng:
    """Deterministic sampler on a Philox counter stream.

    The same (seed, stream) pair always replays the identical sample
    sequence.  Gaussians come from Box-Muller over the Philox uniforms,
    with the spare deviate cached across calls.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=(self.seed, self.stream)))
        self._spare = None

    def spawn(self, stream):
        """Independent stream under the same seed."""
        return SeededRng(self.seed, stream)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def normal(self, size=None):
        """Standard normal samples via Box-Muller."""
        if size is None:
            return float(self.normal(1)[0])
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        out = np.empty(n)
        start = 0
        if self._spare is not None and n > 0:
            out[0] = self._spare
            self._spare = None
            start = 1
        remaining = n - start
        if remaining > 0:
            pairs = (remaining + 1) // 2
            # u1 in (0, 1]: log(0) is the failure mode, not log(1)
            u1 = 1.0 - self._gen.random(pairs)
            u2 = self._gen.random(pairs)
            r = np.sqrt(-2.0 * np.log(u1))
            theta = 2.0 * math.pi * u2
            z = np.empty(2 * pairs)
            z[0::2] = r * np.cos(theta)
            z[1::2] = r * np.sin(theta)
            out[start:] = z[:remaining]
            if 2 * pairs > remaining:
                self._spare = z[remaining]
        if np.isscalar(size):
            return out
        return out.reshape(size)
