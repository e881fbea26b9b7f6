"""Matplotlib figure rendering for CLI report outputs.

Every report-producing command can drop a PNG next to its delimited output:
training logs get a loss/privacy curve, evaluation reports get a per-column
marginal comparison grid, and sweeps get a trend plot. All rendering uses
the Agg backend and writes files only.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .data import Schema  # noqa: E402

FIG_DPI = 130

_STYLE = {
    "figure.facecolor": "white",
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def _save(fig, path) -> str:
    path = Path(path)
    fig.savefig(path, dpi=FIG_DPI, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def sibling_path(out_path, suffix: str) -> Path:
    """report.json -> report_<suffix>.png, next to the report."""
    out = Path(out_path)
    return out.with_name(f"{out.stem}_{suffix}.png")


def training_curve(log_records: list[dict], path) -> str:
    """Train/validation NLL over steps, with spent privacy budget overlaid."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        steps = [r["step"] for r in log_records]
        val = [r["val_nll"] for r in log_records]
        ax.plot(steps, val, marker="o", ms=2.5, lw=1.2, label="validation NLL")
        train = [(r["step"], r["train_nll"]) for r in log_records
                 if r.get("train_nll") is not None]
        if train:
            ax.plot(*zip(*train), lw=1.0, alpha=0.7, label="batch NLL")
        ax.set_xlabel("step")
        ax.set_ylabel("NLL (nats/row)")
        spent = [(r["step"], r["spent_epsilon"]) for r in log_records
                 if r.get("spent_epsilon") is not None]
        if spent:
            ax2 = ax.twinx()
            ax2.plot(*zip(*spent), color="crimson", lw=1.0, ls="--", label="spent epsilon")
            ax2.set_ylabel("spent epsilon", color="crimson")
            ax2.spines.right.set_visible(True)
            ax2.grid(False)
        ax.legend(loc="upper right", fontsize=8)
        return _save(fig, path)


def marginal_grid(real_rows: list[list], synth_rows: list[list], schema: Schema,
                  path, max_columns: int = 16, bins: int = 30) -> str:
    """Per-column real-vs-synthetic marginal comparison grid."""
    cols = list(schema.columns)[:max_columns]
    ncols = min(4, len(cols))
    nrows = math.ceil(len(cols) / ncols)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.0 * ncols, 2.3 * nrows),
                                 squeeze=False)
        for ax in axes.ravel()[len(cols):]:
            ax.axis("off")
        for ax, col in zip(axes.ravel(), cols):
            j = schema.names.index(col.name)
            real = [r[j] for r in real_rows]
            synth = [r[j] for r in synth_rows]
            if col.kind == "numeric":
                ax.hist(real, bins=bins, range=(col.min, col.max), density=True,
                        alpha=0.55, label="real")
                ax.hist(synth, bins=bins, range=(col.min, col.max), density=True,
                        alpha=0.55, label="synthetic")
            else:
                cats = list(col.categories)
                xs = range(len(cats))
                rfreq = [real.count(c) / max(len(real), 1) for c in cats]
                sfreq = [synth.count(c) / max(len(synth), 1) for c in cats]
                width = 0.4
                ax.bar([x - width / 2 for x in xs], rfreq, width, alpha=0.75, label="real")
                ax.bar([x + width / 2 for x in xs], sfreq, width, alpha=0.75,
                       label="synthetic")
                ax.set_xticks(list(xs))
                labels = [c if len(c) <= 8 else c[:7] + "…" for c in cats]
                ax.set_xticklabels(labels, rotation=45 if len(cats) > 4 else 0,
                                   fontsize=7)
            ax.set_title(col.name, fontsize=9)
        handles, labels = axes.ravel()[0].get_legend_handles_labels()
        fig.legend(handles, labels, loc="upper right", fontsize=8)
        fig.tight_layout()
        return _save(fig, path)


def sweep_trend(aggregates: list[dict], param: str, path) -> str:
    """Median best-validation NLL (and detection when present) vs the swept value."""
    aggregates = sorted(aggregates, key=lambda a: a["value"])
    xs = [a["value"] for a in aggregates]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.2, 3.4))
        ax.plot(xs, [a["median_best_val_nll"] for a in aggregates],
                marker="o", lw=1.3, label="median best-val NLL")
        if all(math.isfinite(x) and x > 0 for x in xs) and max(xs) / min(xs) >= 20:
            ax.set_xscale("log")
        ax.set_xlabel(param)
        ax.set_ylabel("NLL (nats/row)")
        det = [(a["value"], a["median_metrics"].get("det"))
               for a in aggregates if a.get("median_metrics", {}).get("det") is not None]
        if det:
            ax2 = ax.twinx()
            ax2.plot(*zip(*det), color="seagreen", marker="s", ms=3, lw=1.0, ls="--",
                     label="median detection score")
            ax2.set_ylabel("detection score", color="seagreen")
            ax2.grid(False)
            ax2.spines.right.set_visible(True)
        ax.legend(loc="best", fontsize=8)
        return _save(fig, path)
