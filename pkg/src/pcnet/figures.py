"""Matplotlib figure rendering for the report-producing commands.

Every figure is written to a file next to its delimited counterpart;
nothing is displayed interactively.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

FIGSIZE = (6.0, 3.8)
DPI = 130


def plot_loss_curves(rows, out_png, title="training loss"):
    """rows: (step, main, aux2, aux3, total) tuples."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    steps = [r[0] for r in rows]
    for idx, label in ((4, "total"), (1, "main"), (2, "aux 1/2"), (3, "aux 1/4")):
        ax.plot(steps, [r[idx] for r in rows], label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.savefig(out_png, bbox_inches="tight", dpi=DPI)
    plt.close(fig)


def plot_roc_curves(curves, out_png, title="ROC"):
    """curves: (label, fpr, tpr, auc) tuples."""
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    for label, fpr, tpr, auc in curves:
        ax.plot(fpr, tpr, linewidth=1.0,
                label=f"{label} (AUC {auc:.4f})" if auc is not None else label)
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.6)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(fontsize=7, loc="lower right")
    fig.savefig(out_png, bbox_inches="tight", dpi=DPI)
    plt.close(fig)


def plot_complexity(rows, out_png, title="model complexity"):
    """rows: (variant, parameter_count, flops) tuples."""
    fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.2))
    names = [r[0] for r in rows]
    xs = range(len(rows))
    for ax, idx, label, scale in ((axes[0], 1, "parameters (M)", 1e6),
                                  (axes[1], 2, "FLOPs (G)", 1e9)):
        ax.bar(xs, [r[idx] / scale for r in rows], color="#4878a8")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel(label)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_png, bbox_inches="tight", dpi=DPI)
    plt.close(fig)
