"""Shared test utilities: the central finite-difference oracle."""

import numpy as np


def central_diff(f, x, h=1e-5, coords=None):
    """Central finite differences of a scalar function at x.

    f maps an array of x's shape to a float; returns the gradient (or
    only the entries listed in coords as a dict coord -> value).
    """
    x = np.array(x, dtype=np.float64)
    if coords is None:
        coords = list(np.ndindex(*x.shape))
        out = np.zeros_like(x)
        for c in coords:
            out[c] = _diff_at(f, x, c, h)
        return out
    return {c: _diff_at(f, x, c, h) for c in coords}


def _diff_at(f, x, c, h):
    xp = x.copy()
    xp[c] += h
    fp = f(xp)
    xm = x.copy()
    xm[c] -= h
    fm = f(xm)
    return (fp - fm) / (2.0 * h)


def rel_err(a, b, floor=1e-8):
    """Elementwise relative error with an absolute floor for near-zeros."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / scale


def assert_grad_close(analytic, numeric, tol=1e-5, floor=1e-8):
    err = rel_err(analytic, numeric, floor)
    assert np.max(err) < tol, f"max relative gradient error {np.max(err):.3e} >= {tol}"
