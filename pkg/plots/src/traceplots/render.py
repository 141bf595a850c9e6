"""Render gradient-variance trace and accuracy CSVs into figure files.

Reads only the documented CSV schemas (variance_trace.csv, accuracy.csv,
summary.csv); it has no dependency on the engine that produced them.
Renders are pure functions of the input CSVs: fixed style, no timestamps,
so the same inputs always produce byte-identical images.

Usage:
    render --kind variance_vs_block --in variance_trace.csv \
           --steps 100,1000,2000 --out fig.png
"""

import argparse
import csv
import math
import sys
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

KINDS = ("variance_vs_block", "l2_vs_block", "accuracy_curves", "a_vs_block", "ablation_panel")

TRACE_COLUMNS = {"step", "block_index", "scale_index", "mean_grad_variance", "grad_l2", "mean_abs_a"}
ACCURACY_COLUMNS = {"step", "loss", "train_accuracy"}

PANEL_WIDTH = 3.2
PANEL_HEIGHT = 2.8
DPI = 120


class RenderError(ValueError):
    pass


@dataclass
class FigureSpec:
    kind: str
    inputs: list
    out: str
    steps: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RenderError(f"unknown figure kind {self.kind!r}; choose from {KINDS}")
        if not self.inputs:
            raise RenderError("at least one input CSV is required")


def read_rows(path, required_columns):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = set(reader.fieldnames or [])
        missing = required_columns - header
        if missing:
            raise RenderError(f"{path}: missing column(s) {sorted(missing)}")
        return [row for row in reader]


def _trace_by_step(path):
    rows = read_rows(path, TRACE_COLUMNS)
    by_step = {}
    for row in rows:
        by_step.setdefault(int(row["step"]), []).append(row)
    for step_rows in by_step.values():
        step_rows.sort(key=lambda r: int(r["block_index"]))
    return by_step


def _scale_boundaries(step_rows):
    bounds = []
    for a, b in zip(step_rows, step_rows[1:]):
        if int(b["scale_index"]) != int(a["scale_index"]):
            bounds.append(0.5 * (int(a["block_index"]) + int(b["block_index"])))
    return bounds


def _panel_per_step(spec, value_column, ylabel):
    by_step = _trace_by_step(spec.inputs[0])
    steps = spec.steps or sorted(by_step)
    for s in steps:
        if s not in by_step:
            raise RenderError(f"{spec.inputs[0]}: no rows for step {s} "
                              f"(available: {sorted(by_step)})")
    fig, axes = plt.subplots(1, len(steps),
                             figsize=(PANEL_WIDTH * len(steps), PANEL_HEIGHT),
                             squeeze=False)
    for ax, step in zip(axes[0], steps):
        rows = by_step[step]
        xs = [int(r["block_index"]) for r in rows]
        ys = [float(r[value_column]) for r in rows]
        finite = [(x, y) for x, y in zip(xs, ys) if math.isfinite(y)]
        blown = [x for x, y in zip(xs, ys) if not math.isfinite(y)]
        if finite:
            ax.plot(*zip(*finite), marker="o", markersize=3, linewidth=1.2, color="#1f5fa8")
        if blown:
            top = max((y for _, y in finite), default=1.0)
            ax.plot(blown, [top] * len(blown), linestyle="none", marker="x",
                    markersize=7, color="#c02020", label="non-finite")
            ax.legend(frameon=False, fontsize=7)
        for b in _scale_boundaries(rows):
            ax.axvline(b, color="#999999", linewidth=0.8, linestyle="--")
        ax.set_xticks(xs)
        ax.tick_params(axis="x", labelsize=6)
        ax.set_xlabel("residual block")
        ax.set_title(f"step {step}", fontsize=9)
    axes[0][0].set_ylabel(ylabel)
    fig.tight_layout()
    return fig


def _curves(spec, labels=None):
    fig, ax = plt.subplots(figsize=(2 * PANEL_WIDTH, 1.2 * PANEL_HEIGHT))
    for i, path in enumerate(spec.inputs):
        rows = read_rows(path, ACCURACY_COLUMNS)
        xs = [int(r["step"]) for r in rows]
        ys = [float(r["train_accuracy"]) for r in rows]
        pts = [(x, y) for x, y in zip(xs, ys) if math.isfinite(y)]
        label = labels[i] if labels else str(path)
        if pts:
            ax.plot(*zip(*pts), linewidth=1.2, label=label)
        else:
            ax.plot([], [], label=f"{label} (non-finite)")
    ax.set_xlabel("training step")
    ax.set_ylabel("train accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return fig


def build_figure(spec: FigureSpec):
    """Build the matplotlib figure for a spec (exposed for tests)."""
    if spec.kind == "variance_vs_block":
        return _panel_per_step(spec, "mean_grad_variance", "mean gradient variance")
    if spec.kind == "l2_vs_block":
        return _panel_per_step(spec, "grad_l2", "gradient l2 norm")
    if spec.kind == "a_vs_block":
        return _panel_per_step(spec, "mean_abs_a", "mean |beta/gamma|")
    if spec.kind == "accuracy_curves":
        return _curves(spec)
    if spec.kind == "ablation_panel":
        labels = [f"Model-{i + 1}" for i in range(len(spec.inputs))]
        return _curves(spec, labels=labels)
    raise RenderError(f"unknown figure kind {spec.kind!r}")


def render(spec: FigureSpec):
    fig = build_figure(spec)
    # strip the Software tag so output bytes depend only on the inputs
    fig.savefig(spec.out, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return spec.out


def parse_args(argv=None):
    p = argparse.ArgumentParser(prog="render", description=__doc__)
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--in", dest="inputs", required=True,
                   help="input CSV path, or comma-separated paths for curve figures")
    p.add_argument("--steps", help="comma-separated steps to display (trace figures)")
    p.add_argument("--out", required=True, help="output image path")
    args = p.parse_args(argv)
    steps = [int(s) for s in args.steps.split(",")] if args.steps else []
    return FigureSpec(args.kind, args.inputs.split(","), args.out, steps)


def run(argv=None) -> int:
    try:
        spec = parse_args(argv)
        render(spec)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    except (RenderError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
