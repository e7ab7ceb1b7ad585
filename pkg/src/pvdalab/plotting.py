"""Static SVG figures for training and ablation reports.

Output is byte-stable: a fixed hash salt, no date metadata, and the Agg-free
SVG backend.  Bars and lines carry ``gid`` attributes so tests (and people
diffing SVGs) can count them.
"""

from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TARGET_COLOR = "#2b6ca3"
OUTLIER_COLOR = "#c9c9c9"

_RC = {
    "svg.hashsalt": "pvdalab",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.2),
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def placeholder(path, message="no snapshots"):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.set_axis_off()
        ax.text(0.5, 0.5, message, ha="center", va="center", fontsize=12, gid="placeholder")
        return _save(fig, path)


def gamma_bars(path, weights, target_mask, title=None):
    """One bar per source class; target classes filled, outliers grey and hatched."""
    weights = np.asarray(weights, dtype=np.float64)
    target_mask = np.asarray(target_mask, dtype=bool)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for c, (w, is_target) in enumerate(zip(weights, target_mask)):
            ax.bar(
                c,
                w,
                color=TARGET_COLOR if is_target else OUTLIER_COLOR,
                hatch=None if is_target else "//",
                edgecolor="black",
                linewidth=0.5,
                gid=f"bar-{'target' if is_target else 'outlier'}-{c}",
            )
        ax.axhline(1.0, color="black", linestyle=":", linewidth=0.8)
        ax.set_xticks(range(len(weights)))
        ax.set_xlabel("class")
        ax.set_ylabel("class weight (mean 1)")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def accuracy_curve(path, curves):
    """``curves`` maps a label to a per-epoch accuracy list."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, acc in curves.items():
            epochs = np.arange(1, len(acc) + 1)
            ax.plot(epochs, acc, marker="o", markersize=2.5, label=label, gid=f"curve-{label}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("target accuracy")
        ax.set_ylim(0, 1)
        if len(curves) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def k_sweep(path, k_values, means, stds=None):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        k_values = np.asarray(k_values)
        means = np.asarray(means)
        ax.plot(k_values, means, marker="s", color=TARGET_COLOR, gid="k-sweep")
        if stds is not None:
            stds = np.asarray(stds)
            ax.fill_between(k_values, means - stds, means + stds, color=TARGET_COLOR, alpha=0.15, linewidth=0)
        ax.set_xticks(k_values)
        ax.set_xlabel("K (clusters)")
        ax.set_ylabel("mean target accuracy")
        return _save(fig, path)


def variant_bars(path, rows):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        names = [r["variant"] for r in rows]
        x = np.arange(len(rows))
        ax.bar(
            x,
            [r["accuracy_mean"] for r in rows],
            yerr=[r["accuracy_std"] for r in rows],
            color=TARGET_COLOR,
            capsize=2,
            gid="variants",
        )
        ax.set_xticks(x, names, rotation=30, ha="right")
        ax.set_ylabel("mean target accuracy")
        ax.set_ylim(0, 1)
        return _save(fig, path)


def plot_train_report(report, out_dir):
    """Figures for a training report dict; returns the written paths."""
    out_dir = Path(out_dir)
    snaps = report.get("snapshots", [])
    written = []
    if snaps:
        target = np.asarray(report["true_distribution"]) > 0
        last = snaps[-1]
        written.append(gamma_bars(out_dir / "gamma_weights.svg", last["normalized"], target, f"step {last['step']}"))
    else:
        written.append(placeholder(out_dir / "gamma_weights.svg"))
    epochs = report.get("epochs", [])
    if epochs:
        written.append(accuracy_curve(out_dir / "accuracy.svg", {"target": [e["target_accuracy"] for e in epochs]}))
    else:
        written.append(placeholder(out_dir / "accuracy.svg", "no epochs"))
    return written


def plot_ablation(result, out_dir):
    out_dir = Path(out_dir)
    written = []
    if result["rows"]:
        written.append(variant_bars(out_dir / "variants.svg", result["rows"]))
    sweep = result.get("k_sweep", [])
    if sweep:
        written.append(
            k_sweep(
                out_dir / "k_sweep.svg",
                [r["k"] for r in sweep],
                [r["accuracy_mean"] for r in sweep],
                [r["accuracy_std"] for r in sweep],
            )
        )
    return written
