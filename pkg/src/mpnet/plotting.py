"""Matplotlib panels for run reports and model comparisons, saved as SVG."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (4.5, 3.2),
    "svg.hashsalt": "mpnet",
    "svg.fonttype": "path",
}


def save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)


def _epochs(report):
    return np.arange(1, len(report.folds[0].curves.train_loss) + 1)


def _mean_curve(report, key):
    rows = [getattr(f.curves, key) for f in report.folds]
    if any(v is None for r in rows for v in r):
        return None
    return np.mean(np.array(rows, dtype=float), axis=0)


def curve_panel(report, which: str):
    """Training and validation accuracy (``which='acc'``) or loss over epochs."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = _epochs(report)
        for f in report.folds:
            ax.plot(x, getattr(f.curves, f"train_{which}"), color="C0", alpha=0.2, lw=0.8)
        ax.plot(x, _mean_curve(report, f"train_{which}"), color="C0", lw=1.8, label="training")
        val = _mean_curve(report, f"val_{which}")
        if val is not None:
            ax.plot(x, val, color="C1", lw=1.8, label="validation")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy" if which == "acc" else "loss")
        ax.set_title(f"{report.model} on {report.dataset}: mean over {len(report.folds)} folds")
        ax.legend(frameon=False)
    return fig


def roc_panel(report):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        for ci, name in enumerate(report.classes):
            first = True
            for f in report.folds:
                pts = f.roc.get(name)
                if not pts:
                    continue
                fpr, tpr = zip(*pts)
                ax.plot(fpr, tpr, color=f"C{ci}", alpha=0.5, lw=0.9, label=name if first else None)
                first = False
        ax.plot([0, 1], [0, 1], color="0.6", ls=":", lw=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title("ROC per class (one line per fold)")
        ax.legend(frameon=False, loc="lower right")
    return fig


def confusion_panel(report):
    counts = sum(f.confusion.counts for f in report.folds)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        im = ax.imshow(counts, cmap="Blues")
        ticks = np.arange(len(report.classes))
        ax.set_xticks(ticks, report.classes, rotation=45, ha="right")
        ax.set_yticks(ticks, report.classes)
        thresh = counts.max() / 2 if counts.size else 0
        for (i, j), v in np.ndenumerate(counts):
            ax.text(j, i, str(v), ha="center", va="center", fontsize=7,
                    color="white" if v > thresh else "black")
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title("confusion matrix (all folds)")
        fig.colorbar(im, ax=ax, fraction=0.046)
    return fig


def comparison_panel(comparison):
    rows = comparison.rows
    names = [r["dataset"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        deltas = [r["accuracy"] or 0.0 for r in rows]
        colors = ["C2" if d >= 0 else "C3" for d in deltas]
        ax.bar(names, deltas, color=colors)
        ax.axhline(0, color="0.3", lw=0.8)
        ax.axhline(comparison.mean_accuracy_delta_pp, color="0.3", ls="--", lw=0.8,
                   label=f"mean {comparison.mean_accuracy_delta_pp:+.2f} pp")
        ax.set_ylabel(f"accuracy {comparison.model_a} - {comparison.model_b} (pp)")
        ax.legend(frameon=False)
    return fig


def grouped_accuracy_panel(reports_a, reports_b):
    """Side-by-side accuracy bars per dataset for two sets of reports."""
    bmap = {r.dataset: r for r in reports_b}
    names = [r.dataset for r in reports_a]
    a = [100 * (r.aggregate["accuracy"] or 0) for r in reports_a]
    b = [100 * (bmap[n].aggregate["accuracy"] or 0) for n in names]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        ax.bar(x - 0.2, a, 0.4, label=reports_a[0].model if reports_a else "a")
        ax.bar(x + 0.2, b, 0.4, label=reports_b[0].model if reports_b else "b")
        ax.set_xticks(x, names)
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(min(a + b + [100]) - 10, 100)
        ax.legend(frameon=False, ncols=2)
    return fig
