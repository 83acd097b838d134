"""Static result figures rendered to SVG next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "poseaug"


def loss_curve_svg(history, path):
    """Per-step loss components on a log-friendly axis."""
    steps = np.arange(len(history))
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in ("bce", "triplet_pose", "triplet_identity",
                 "triplet_emotion", "total"):
        ax.plot(steps, [h[name] for h in history], label=name,
                linewidth=1.8 if name == "total" else 1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Training loss components")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def roc_svg(roc_block, path, target: str):
    """One-vs-rest ROC curves for every class of one target label."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for cls, curve in roc_block["per_class"].items():
        ax.plot(curve["fpr"], curve["tpr"],
                label=f"{cls} (AUC={curve['auc']:.3f})", linewidth=1.0)
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"ROC — {target} (macro AUC={roc_block['macro_auc']:.3f})")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def confusion_svg(classes, matrix, path, target: str):
    """Confusion-count heatmap with per-cell annotations."""
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(classes)), [str(c) for c in classes],
                  rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(classes)), [str(c) for c in classes], fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"Confusion — {target}")
    threshold = matrix.max() / 2 if matrix.size else 0
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(matrix[i, j]), ha="center", va="center",
                    fontsize=7,
                    color="white" if matrix[i, j] > threshold else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
