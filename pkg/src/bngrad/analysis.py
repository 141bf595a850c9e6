"""Closed-form moment and variance-propagation machinery, in two modes.

Moments of y = ReLU(z + a), z standard normal, drive everything: the
ReLU gradient pass-through constant c1 = 0.5 + p(a) and the output
second moment c2.  Mode "paper" evaluates the published closed-form
expressions literally as printed; mode "oracle" evaluates the same
moments by direct numerical integration (adaptive Simpson, cross-checked
by Monte Carlo).  The two disagree: at a = 0 the printed second moment
is 1.5 while the integral gives 0.5.  Both are preserved on purpose and
every consumer states its mode.

The forward recursion per scale follows the additive structure
Var(out_L) = Var(out_{L-1}) + unit * rowsum(W_L^2): in paper mode the
unit is c2 with the printed extra 1/k on the first block of a scale; in
oracle mode the unit is the exact ReLU output variance e_y2 - e_y^2 and
the first block uses its actual (already k-fold narrower) row sums, which
is what batches measured on a real network reproduce.
"""

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numerics import INV_SQRT_2PI, SeededRng, adaptive_simpson, normal_pdf, p_of_a

MOMENTS_HEADER = ["a", "mode", "e_y", "e_y2", "p_a", "c1", "c2", "eq14_constant"]
PREDICTION_HEADER = ["block_index", "scale_index", "pred_forward_var_mean",
                     "k_estimate", "backward_bound_factor", "simplified_ratio"]


class MomentMode(Enum):
    PAPER = "paper"
    ORACLE = "oracle"

    @classmethod
    def parse(cls, s):
        if isinstance(s, cls):
            return s
        return cls(str(s).lower())


def relu_moments_formula(a):
    """First and second moment of ReLU(z + a) per the published algebra,
    evaluated exactly as printed."""
    a = float(a)
    e_y = INV_SQRT_2PI + 0.5 * a + INV_SQRT_2PI * (1.0 - math.exp(-0.5 * a * a))
    e_y2 = (0.5 + math.sqrt(2.0 / math.pi) * a + 0.5 * a * a
            + math.exp(-0.5 * a * a) + p_of_a(a))
    return e_y, e_y2


def relu_moments_quadrature(a, tol=1e-10):
    """The same moments by direct integration of the shifted Gaussian.

    e_y  = int_{-a}^{inf} (z + a)   phi(z) dz
    e_y2 = int_{-a}^{inf} (z + a)^2 phi(z) dz

    The default tolerance leaves margin under the 1e-8 accuracy contract
    (Simpson's 15*eps acceptance rule is a heuristic, not a guarantee).
    """
    a = float(a)
    lo = -a
    hi = max(8.0, -a + 8.0)
    e_y = adaptive_simpson(lambda z: (z + a) * normal_pdf(z), lo, hi, tol)
    e_y2 = adaptive_simpson(lambda z: (z + a) ** 2 * normal_pdf(z), lo, hi, tol)
    return e_y, e_y2


def relu_moments_monte_carlo(a, n=1_000_000, rng=None):
    """Sampling estimate of the same moments.

    Returns (e_y, e_y2, stderr_e_y, stderr_e_y2); the standard errors let
    callers check agreement with the quadrature within sampling noise.
    """
    if rng is None:
        rng = SeededRng(0)
    y = np.maximum(rng.normal(int(n)) + float(a), 0.0)
    y2 = y * y
    return (float(y.mean()), float(y2.mean()),
            float(y.std() / math.sqrt(n)), float(y2.std() / math.sqrt(n)))


def c_constants(a, mode):
    """(c1, c2): ReLU gradient pass-through fraction and output second
    moment, with c2 taken from the selected mode."""
    mode = MomentMode.parse(mode)
    c1 = 0.5 + p_of_a(a)
    if mode is MomentMode.PAPER:
        _, c2 = relu_moments_formula(a)
    else:
        _, c2 = relu_moments_quadrature(a)
    return c1, c2


@dataclass
class MomentReport:
    a: float
    mode: MomentMode
    e_y: float
    e_y2: float
    p_a: float
    c1: float
    c2: float
    c_ratio: float  # c1 / c2, the per-layer gradient-variance constant


def moment_report(a, mode) -> MomentReport:
    mode = MomentMode.parse(mode)
    if mode is MomentMode.PAPER:
        e_y, e_y2 = relu_moments_formula(a)
    else:
        e_y, e_y2 = relu_moments_quadrature(a)
    pa = p_of_a(a)
    c1 = 0.5 + pa
    c2 = e_y2
    return MomentReport(float(a), mode, e_y, e_y2, pa, c1, c2, c1 / c2)


def write_moments_csv(path, a_values, modes=(MomentMode.PAPER, MomentMode.ORACLE)):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MOMENTS_HEADER)
        for a in a_values:
            for mode in modes:
                r = moment_report(a, mode)
                w.writerow([repr(float(a)), r.mode.value, repr(r.e_y), repr(r.e_y2),
                            repr(r.p_a), repr(r.c1), repr(r.c2), repr(r.c_ratio)])


def bn_grad_variance(var_dz, e_dz_zhat, gamma, var_x):
    """Per-feature gradient variance out of a BN backward pass:
    (gamma^2 / var_x) * (var_dz - e_dz_zhat^2)."""
    var_x = np.asarray(var_x, dtype=np.float64)
    if np.any(var_x <= 0):
        raise ValueError("BN input variance must be positive")
    var_dz = np.asarray(var_dz, dtype=np.float64)
    e_dz_zhat = np.asarray(e_dz_zhat, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    return (gamma * gamma / var_x) * (var_dz - e_dz_zhat * e_dz_zhat)


def forward_variance_conv(w, var_in):
    """Variance map of y = W x for independent features: out = (W^2) var_in."""
    w = np.asarray(w, dtype=np.float64)
    var_in = np.asarray(var_in, dtype=np.float64)
    if w.shape[1] != var_in.shape[0]:
        raise ValueError(f"weights {w.shape} incompatible with variance vector {var_in.shape}")
    return (w * w) @ var_in


def backward_variance_conv(w, var_dout):
    """Variance map of dx = W^T dy: out_i = sum_j W_ji^2 var_dout_j."""
    w = np.asarray(w, dtype=np.float64)
    var_dout = np.asarray(var_dout, dtype=np.float64)
    if w.shape[0] != var_dout.shape[0]:
        raise ValueError(f"weights {w.shape} incompatible with variance vector {var_dout.shape}")
    return (w * w).T @ var_dout


def relu_grad_variance(a, var_din):
    """Gradient variance through the ReLU mask: (0.5 + p(a)) * var_din."""
    return (0.5 + p_of_a(a)) * np.asarray(var_din, dtype=np.float64)


def layer_grad_variance_ratio(w_L, w_Lm1, var_dy_L, a, mode):
    """Predicted Var(grad at layer L-1 input) through one composite layer:

      [sum_j W_L[j,i]^2 var_dy_L[j] / sum_j W_{L-1}[i,j]^2] * c1/c2
    """
    w_L = np.asarray(w_L, dtype=np.float64)
    w_Lm1 = np.asarray(w_Lm1, dtype=np.float64)
    if w_L.shape[1] != w_Lm1.shape[0]:
        raise ValueError(f"layer widths disagree: {w_L.shape} vs {w_Lm1.shape}")
    numer = backward_variance_conv(w_L, var_dy_L)
    denom = (w_Lm1 * w_Lm1).sum(axis=1)
    if np.any(denom <= 0):
        raise ValueError("zero row-sum in the lower layer's squared weights")
    c1, c2 = c_constants(a, mode)
    return numer / denom * (c1 / c2)


def layer_grad_variance_bounds(n_L_out, n_Lm1_in, var_wL, var_wLm1, e_var_dyL, a, mode, K=1.0):
    """(lower, upper) bounds on the expected gradient variance below one layer.

    lower = (n_L_out / n_Lm1_in) * (Var(W_L)/Var(W_{L-1})) * (c1/c2) * e_var_dyL
    upper = K * lower, with K >= 1 the mean(1/X)*mean(X) bound for the
    row sums of the lower layer's squared weights.
    """
    if n_L_out <= 0 or n_Lm1_in <= 0:
        raise ValueError("dimensions must be positive")
    if var_wL <= 0 or var_wLm1 <= 0:
        raise ValueError("weight variances must be positive")
    if K < 1.0:
        raise ValueError("K must be >= 1")
    c1, c2 = c_constants(a, mode)
    lower = (n_L_out / n_Lm1_in) * (var_wL / var_wLm1) * (c1 / c2) * e_var_dyL
    return lower, K * lower


def kantorovich_bound(c, d):
    """Upper bound on E(1/X)E(X) for X supported on [c, d]: (c+d)^2/(4cd)."""
    if not 0 < c <= d:
        raise ValueError("need 0 < c <= d")
    return (c + d) ** 2 / (4.0 * c * d)


def mean_inv_mean(x):
    """mean(1/X) * mean(X) for a positive sample; >= 1 by convexity."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("values must be positive")
    return float((1.0 / x).mean() * x.mean())


def estimate_K(w):
    """Empirical and analytic K for X = row sums of the squared matrix.

    Returns (mean(1/X)*mean(X), kantorovich_bound(min X, max X)).
    """
    w = np.asarray(w, dtype=np.float64)
    x = (w * w).sum(axis=1)
    if np.any(x <= 0):
        raise ValueError("matrix has an all-zero row")
    return mean_inv_mean(x), kantorovich_bound(float(x.min()), float(x.max()))


@dataclass
class BlockWeightInfo:
    """Weights of one residual block as the predictor consumes them."""
    first_of_scale: bool
    w_first: np.ndarray             # first branch layer
    w_second: np.ndarray            # second (output) branch layer
    w_shortcut: np.ndarray | None = None  # first block of a scale only


def blocks_from_model(model) -> list:
    return [BlockWeightInfo(b.first_of_scale, b.w1.weights, b.w2.weights,
                            b.sc_w.weights if b.sc_w is not None else None)
            for b in model.blocks]


def _unit_constant(a, mode):
    mode = MomentMode.parse(mode)
    if mode is MomentMode.PAPER:
        _, c2 = relu_moments_formula(a)
        return c2
    e_y, e_y2 = relu_moments_quadrature(a)
    return e_y2 - e_y * e_y


def _rowsum_sq(w):
    w = np.asarray(w, dtype=np.float64)
    return (w * w).sum(axis=1)


def resnet_forward_variance(blocks, k, a, mode):
    """Per-block forward variance vectors by the additive recursion.

    The recursion restarts at every first-of-scale block (its BN layers
    erase the incoming variance); within a scale each block adds
    unit * rowsum(w_second^2).
    """
    mode = MomentMode.parse(mode)
    if not blocks or not blocks[0].first_of_scale:
        raise ValueError("block list must start with a first-of-scale block")
    unit = _unit_constant(a, mode)
    out = []
    var = None
    for b in blocks:
        if b.first_of_scale:
            if b.w_shortcut is None:
                raise ValueError("first block of a scale needs shortcut weights")
            base = _rowsum_sq(b.w_shortcut) + _rowsum_sq(b.w_second)
            if mode is MomentMode.PAPER:
                base = base / k
            var = unit * base
        else:
            var = var + unit * _rowsum_sq(b.w_second)
        out.append(var)
    return out


def resnet_forward_variance_closed_form(blocks, k, a, mode):
    """Same prediction via the per-scale closed form
    unit * (sum_{J=2..L} rowsum(w_second_J^2) + first-block term)."""
    mode = MomentMode.parse(mode)
    if not blocks or not blocks[0].first_of_scale:
        raise ValueError("block list must start with a first-of-scale block")
    unit = _unit_constant(a, mode)
    out = []
    for i, b in enumerate(blocks):
        if b.first_of_scale:
            scale_start = i
            first = blocks[i]
            base = _rowsum_sq(first.w_shortcut) + _rowsum_sq(first.w_second)
            if mode is MomentMode.PAPER:
                base = base / k
        acc = base.copy()
        for j in range(scale_start + 1, i + 1):
            acc = acc + _rowsum_sq(blocks[j].w_second)
        out.append(unit * acc)
    return out


def resnet_backward_variance_bound(blocks, k, a, mode, K_per_block=None, e_var_dyL=None):
    """Per-block (upper bound, simplified ratio) on the gradient variance
    crossing the block, reading backward within a scale.

    For block L >= 2 of its scale:
      bound = K_L * (1 + (c1/c2)^2 * Var(w_first_L) / D_L) * e_var_dyL
      D_L   = sum_{J=2..L-1} Var(w_second_J) + (1/k)(Var(w_shortcut_1) + Var(w_second_1))
    and the simplified ratio is L/(L-1) (equal weight variances, k=2).
    First-of-scale blocks get (nan, nan): the within-scale form does not
    cover the scale crossing.
    """
    c1, c2 = c_constants(a, mode)
    n = len(blocks)
    if not blocks or not blocks[0].first_of_scale:
        raise ValueError("block list must start with a first-of-scale block")
    ks = [1.0] * n if K_per_block is None else list(K_per_block)
    evs = [1.0] * n if e_var_dyL is None else list(e_var_dyL)
    if len(ks) != n or len(evs) != n:
        raise ValueError("K_per_block / e_var_dyL must have one entry per block")

    out = []
    for i, b in enumerate(blocks):
        if b.first_of_scale:
            scale_start = i
            first = b
            if first.w_shortcut is None:
                raise ValueError("first block of a scale needs shortcut weights")
            denom = (float(np.var(first.w_shortcut)) + float(np.var(first.w_second))) / k
            out.append((float("nan"), float("nan")))
            continue
        L = i - scale_start + 1
        if ks[i] < 1.0:
            raise ValueError("K must be >= 1")
        factor = ks[i] * (1.0 + (c1 / c2) ** 2 * float(np.var(b.w_first)) / denom)
        out.append((factor * evs[i], L / (L - 1.0)))
        denom += float(np.var(b.w_second))
    return out


@dataclass
class BlockPrediction:
    block_index: int
    scale_index: int
    forward_var: np.ndarray
    forward_var_mean: float
    k_estimate: float
    bound_factor: float
    simplified_ratio: float


def predict_blocks(model, a, mode) -> list:
    """Forward variances plus backward bound factors for a whole model.

    K per block is estimated from the predicted forward variance at the
    block input (the actual denominator the gradient is divided by),
    which keeps the bound checkable instead of assumed.
    """
    blocks = blocks_from_model(model)
    fwd = resnet_forward_variance(blocks, model.spec.k, a, mode)

    k_per_block = []
    for i, b in enumerate(model.blocks):
        if b.index_in_scale == 1:
            k_per_block.append(float("nan"))
        else:
            k_per_block.append(mean_inv_mean(fwd[i - 1]))
    safe_k = [1.0 if math.isnan(v) else v for v in k_per_block]
    bounds = resnet_backward_variance_bound(blocks, model.spec.k, a, mode, safe_k)

    out = []
    for i, b in enumerate(model.blocks):
        bound, ratio = bounds[i]
        out.append(BlockPrediction(b.block_index, b.scale_index, fwd[i],
                                   float(fwd[i].mean()), k_per_block[i], bound, ratio))
    return out


def write_prediction_csv(path, predictions):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_HEADER)
        for p in predictions:
            w.writerow([p.block_index, p.scale_index, repr(p.forward_var_mean),
                        _nanrepr(p.k_estimate), _nanrepr(p.bound_factor), _nanrepr(p.simplified_ratio)])


def _nanrepr(x):
    return "nan" if math.isnan(x) else repr(float(x))
