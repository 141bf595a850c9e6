"""Forward and exact backward passes for BN, ReLU, and dense layers.

The composite layer is BN -> ReLU -> dense; the dense map plays the role
of a convolution with a full (n_out, n_in) weight matrix and no weight
sharing.  Backward passes differentiate exactly through the batch
statistics (mean and population variance), including epsilon.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import as_batch


@dataclass
class BnParams:
    """Per-feature scale/shift with the stabilizing epsilon inside Std."""
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def shift_ratios(self):
        """beta_i / gamma_i per feature (the ReLU shift parameter)."""
        return self.beta / self.gamma


@dataclass
class DenseParams:
    weights: np.ndarray  # (n_out, n_in)


@dataclass
class BnCache:
    mean: np.ndarray
    var: np.ndarray
    std: np.ndarray   # sqrt(var + epsilon)
    xhat: np.ndarray  # normalized activations


@dataclass
class LayerCache:
    """Chained caches of one BN -> ReLU -> dense forward call."""
    bn: BnCache | None
    mask: np.ndarray
    dense_in: np.ndarray


@dataclass
class LayerGrads:
    dw: np.ndarray
    dgamma: np.ndarray | None = None
    dbeta: np.ndarray | None = None


def bn_forward(x, p: BnParams):
    """Normalize per feature over the batch, then scale/shift.

    Output feature i has batch mean beta_i and batch variance
    gamma_i^2 * var_i / (var_i + eps).
    """
    x = as_batch(x, min_rows=2)
    if x.shape[1] != p.gamma.shape[0]:
        raise ValueError(f"feature count {x.shape[1]} != gamma size {p.gamma.shape[0]}")
    if p.epsilon <= 0:
        raise ValueError("epsilon must be positive (a zero-variance feature would divide by 0)")
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    std = np.sqrt(var + p.epsilon)
    xhat = (x - mean) / std
    return p.gamma * xhat + p.beta, BnCache(mean, var, std, xhat)


def bn_backward(dy, cache: BnCache, p: BnParams):
    """Exact gradient through batch statistics.

    dx_i = (gamma_i / std_i) * (dy_i - E(dy_i) - xhat_i * E(dy_i * xhat_i))
    with expectations over the batch, so dx has exactly zero batch mean
    per feature.  dgamma/dbeta are batch sums.
    """
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.xhat.shape:
        raise ValueError(f"gradient shape {dy.shape} != forward shape {cache.xhat.shape}")
    dgamma = (dy * cache.xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dz_mean = dy.mean(axis=0)
    dz_xhat_mean = (dy * cache.xhat).mean(axis=0)
    dx = (p.gamma / cache.std) * (dy - dz_mean - cache.xhat * dz_xhat_mean)
    return dx, dgamma, dbeta


def relu_forward(x):
    """Elementwise max(0, x); the mask treats the derivative at 0 as 0."""
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != mask.shape:
        raise ValueError(f"gradient shape {dy.shape} != mask shape {mask.shape}")
    return dy * mask


def dense_forward(x, w: DenseParams):
    """y = x @ W^T per sample; returns the input as the backward cache."""
    x = as_batch(x)
    if x.shape[1] != w.weights.shape[1]:
        raise ValueError(f"input width {x.shape[1]} != weight n_in {w.weights.shape[1]}")
    return x @ w.weights.T, x


def dense_backward(dy, x_in, w: DenseParams):
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != (x_in.shape[0], w.weights.shape[0]):
        raise ValueError(f"gradient shape {dy.shape} incompatible with weights {w.weights.shape}")
    dx = dy @ w.weights
    dw = dy.T @ x_in  # batch sum of outer(dy_b, x_b)
    return dx, dw


def layer_forward(x, bn: BnParams | None, w: DenseParams):
    """BN -> ReLU -> dense composite; bn=None drops the BN sub-layer."""
    if bn is not None:
        t, bn_cache = bn_forward(x, bn)
    else:
        t, bn_cache = as_batch(x), None
    h, mask = relu_forward(t)
    y, dense_in = dense_forward(h, w)
    return y, LayerCache(bn_cache, mask, dense_in)


def layer_backward(dy, cache: LayerCache, bn: BnParams | None, w: DenseParams):
    """Reverse the composite chain; returns (dx, LayerGrads)."""
    dh, dw = dense_backward(dy, cache.dense_in, w)
    dt = relu_backward(dh, cache.mask)
    if bn is not None:
        dx, dgamma, dbeta = bn_backward(dt, cache.bn, bn)
        return dx, LayerGrads(dw, dgamma, dbeta)
    return dt, LayerGrads(dw)
