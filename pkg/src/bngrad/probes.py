"""Instrumentation for the per-block gradient statistics the trainer records.

One trace row per (step, block): mean over features of the per-feature
batch variance of the boundary gradient, its l2 norm, and the mean
absolute shift ratio |beta/gamma| of the block's BN layers.  Non-finite
statistics are kept verbatim in the trace (they are the explosion
markers), never dropped.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

TRACE_HEADER = ["step", "block_index", "scale_index", "mean_grad_variance", "grad_l2", "mean_abs_a"]
A_STATS_HEADER = ["step", "layer_index", "layer_name", "mean_abs_a", "excluded"]

# Cross-block spread at one step beyond this ratio counts as explosion.
# Healthy desk-scale nets show up to ~2e3 total spread (the within-scale
# backward growth compounds to ~13x per 5-block scale at width 16), so the
# cutoff sits three decades above healthy and far below true divergence.
EXPLOSION_RATIO = 1e6


@dataclass
class VarTraceRow:
    step: int
    block_index: int
    scale_index: int
    mean_grad_variance: float
    grad_l2: float
    mean_abs_a: float


class VarTrace:
    """Append-only trace ordered by (step, block_index)."""

    def __init__(self, rows=None):
        self.rows = list(rows) if rows else []

    def append(self, row: VarTraceRow):
        self.rows.append(row)

    def steps(self):
        seen = []
        for r in self.rows:
            if not seen or seen[-1] != r.step:
                seen.append(r.step)
        return seen

    def at_step(self, step):
        return sorted((r for r in self.rows if r.step == step), key=lambda r: r.block_index)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for r in self.rows:
                w.writerow([r.step, r.block_index, r.scale_index,
                            _fmt(r.mean_grad_variance), _fmt(r.grad_l2), _fmt(r.mean_abs_a)])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != TRACE_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            rows = [VarTraceRow(int(a), int(b), int(c), float(d), float(e), float(f))
                    for a, b, c, d, e, f in reader]
        return cls(rows)


def _fmt(x):
    """Round-trippable float text; nan/inf serialized as literals."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def grad_stats(grad):
    """(mean per-feature batch variance, whole-grid l2 norm)."""
    grad = np.asarray(grad, dtype=np.float64)
    with np.errstate(all="ignore"):
        mean_var = float(grad.var(axis=0).mean())
        l2 = float(np.sqrt(np.sum(grad * grad)))
    return mean_var, l2


def record_grad_stats(step, block_index, scale_index, grad, mean_abs_a=float("nan")):
    mean_var, l2 = grad_stats(grad)
    return VarTraceRow(step, block_index, scale_index, mean_var, l2, mean_abs_a)


def mean_abs_shift(bn_params_list):
    """Mean |beta/gamma| over all features of the given BN layers.

    Zero-gamma features are excluded; returns (value, excluded_count).
    """
    vals, excluded = [], 0
    for p in bn_params_list:
        ok = p.gamma != 0
        excluded += int(np.sum(~ok))
        vals.append(np.abs(p.beta[ok] / p.gamma[ok]))
    if not vals or sum(v.size for v in vals) == 0:
        return float("nan"), excluded
    return float(np.mean(np.concatenate(vals))), excluded


@dataclass
class AStatRow:
    step: int
    layer_index: int
    layer_name: str
    mean_abs_a: float
    excluded: int


def record_a_stats(step, model):
    """Per BN layer (forward order): mean |beta/gamma| across features."""
    rows = []
    for i, (name, p) in enumerate(model.bn_layers(), start=1):
        value, excluded = mean_abs_shift([p])
        rows.append(AStatRow(step, i, name, value, excluded))
    return rows


def write_a_stats_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(A_STATS_HEADER)
        for r in rows:
            w.writerow([r.step, r.layer_index, r.layer_name, _fmt(r.mean_abs_a), r.excluded])


class ProbeRecorder:
    """Collects trace rows and BN shift stats during training.

    With capture_branches=True the (shortcut, branch) gradient summands at
    each block input are kept as well, for the additivity check.
    """

    def __init__(self, capture_branches=False):
        self.trace = VarTrace()
        self.a_stats = []
        self.capture_branches = capture_branches
        self.branch_records = []

    def record(self, step, model, boundary_grads, branch_pairs=None):
        blocks = model.blocks
        for b, grad in zip(blocks, boundary_grads):
            bn_list = [p for p in (b.sc_bn, b.bn1, b.bn2) if p is not None]
            abs_a, _ = mean_abs_shift(bn_list) if bn_list else (float("nan"), 0)
            self.trace.append(record_grad_stats(step, b.block_index, b.scale_index, grad, abs_a))
        self.a_stats.extend(record_a_stats(step, model))
        if self.capture_branches and branch_pairs is not None:
            self.branch_records.append((step, branch_pairs))


def detect_explosion(trace: VarTrace):
    """(flag, first offending (step, block_index) or None).

    Flags any non-finite row, or a max/min spread of the per-block
    variance beyond EXPLOSION_RATIO at a single step.
    """
    for r in trace.rows:
        if not (math.isfinite(r.mean_grad_variance) and math.isfinite(r.grad_l2)):
            return True, (r.step, r.block_index)
    for step in trace.steps():
        rows = trace.at_step(step)
        values = [r.mean_grad_variance for r in rows]
        vmax = max(values)
        vmin = min(values)
        if vmax <= 0:
            continue
        if vmin <= 0 or vmax / vmin > EXPLOSION_RATIO:
            worst = rows[int(np.argmax(values))]
            return True, (step, worst.block_index)
    return False, None


@dataclass
class ProfileReport:
    """Shape of the gradient-variance profile at one probed step."""
    step: int
    ratios_per_scale: dict    # scale -> [Var(block L-1)/Var(block L) for L=2..N]
    boundary_drops: dict      # scale s -> Var(last of s-1)/Var(first of s)
    growth_ok: bool           # ratios >= 1 and non-increasing inside each scale
    dip_ok: bool              # every boundary drop < 1


def profile_check(trace: VarTrace, step, ratio_slack=0.0):
    """Check within-scale growth and scale-boundary dips at one step.

    Reading the trace in backward order, gradient variance should grow
    from one block to the one below it inside a scale (with the growth
    slowing as the block index rises) and drop when crossing into the
    previous scale.  The >= 1 growth and < 1 dip conditions are strict;
    ratio_slack is a measurement allowance on the monotone decrease only
    (consecutive ratios carry ~sqrt(2/(batch*width)) estimator noise each).
    """
    rows = trace.at_step(step)
    if not rows:
        raise ValueError(f"no trace rows at step {step}")
    by_scale = {}
    for r in rows:
        by_scale.setdefault(r.scale_index, []).append(r)

    ratios_per_scale = {}
    growth_ok = True
    for scale, srows in sorted(by_scale.items()):
        srows.sort(key=lambda r: r.block_index)
        ratios = []
        for lower, upper in zip(srows, srows[1:]):
            ratios.append(lower.mean_grad_variance / upper.mean_grad_variance)
        ratios_per_scale[scale] = ratios
        for x in ratios:
            if not x >= 1.0:
                growth_ok = False
        for a, b in zip(ratios, ratios[1:]):
            if not b <= a * (1.0 + ratio_slack):
                growth_ok = False

    boundary_drops = {}
    dip_ok = True
    scales = sorted(by_scale)
    for prev, cur in zip(scales, scales[1:]):
        last_prev = by_scale[prev][-1].mean_grad_variance
        first_cur = by_scale[cur][0].mean_grad_variance
        drop = last_prev / first_cur
        boundary_drops[cur] = drop
        if not drop < 1.0:
            dip_ok = False

    return ProfileReport(step, ratios_per_scale, boundary_drops, growth_ok, dip_ok)
