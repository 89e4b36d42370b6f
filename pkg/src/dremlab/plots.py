"""SVG figures drawn from the CSV outputs only."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import harness  # noqa: E402

plt.rcParams.update({"svg.fonttype": "none", "svg.hashsalt": "dremlab", "font.size": 9})


class PlotInputError(ValueError):
    pass


def plot_traces(traces, path, title="Dense reward along scripted policies"):
    """``traces`` maps a label to rows of (step, reward, contact_flag, Fy)."""
    if not traces:
        raise PlotInputError("no reward traces to plot")
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for label, rows in traces.items():
        ax.plot([r[0] for r in rows], [r[1] for r in rows], marker=".", ms=3, lw=1.2, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("reward")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_success(curves, path, title="Evaluation success rate"):
    """``curves`` maps a condition label to aggregate rows (step, mean, min, max, n)."""
    if not curves or not any(curves.values()):
        raise PlotInputError("no learning curves to plot")
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for label, rows in curves.items():
        if not rows:
            continue
        steps = [r[0] for r in rows]
        line = ax.plot(steps, [r[1] for r in rows], lw=1.5, label=label)[0]
        ax.fill_between(steps, [r[2] for r in rows], [r[3] for r in rows], color=line.get_color(), alpha=0.2, lw=0)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_plots(bundle_dirs, out_dir):
    """Render every trace CSV and aggregate curve found in ``bundle_dirs``.

    Trace CSVs are files named ``trace_<kind>.csv``; aggregates are
    ``aggregate.csv`` beside a ``manifest.json``.
    """
    os.makedirs(out_dir, exist_ok=True)
    traces, curves = {}, {}
    for d in bundle_dirs:
        for dirpath, _, files in sorted(os.walk(d)):
            for f in sorted(files):
                full = os.path.join(dirpath, f)
                if f.startswith("trace_") and f.endswith(".csv"):
                    traces[f[len("trace_") : -len(".csv")]] = harness.read_trace(full)
                elif f == "aggregate.csv":
                    curves[os.path.basename(dirpath)] = harness.read_aggregate(full)
    if not traces and not curves:
        raise PlotInputError("bundle holds no trace or curve CSVs")
    written = []
    if traces:
        written.append(plot_traces(traces, os.path.join(out_dir, "reward_traces.svg")))
    if curves:
        written.append(plot_success(curves, os.path.join(out_dir, "success_rate.svg")))
    return written
