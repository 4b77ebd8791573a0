"""Figure emission for run records and reports (headless matplotlib)."""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

FIG_DPI = 110


def plot_loss_curves(named_losses, path):
    """named_losses: mapping label -> list of per-epoch training losses."""
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=FIG_DPI)
    for label, losses in named_losses.items():
        ax.plot(range(1, len(losses) + 1), losses, label=label, linewidth=1.4)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_title("Training loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_metric_curves(named_series, metric_name, path):
    """named_series: mapping label -> per-epoch metric values."""
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=FIG_DPI)
    for label, series in named_series.items():
        ax.plot(range(1, len(series) + 1), series, label=label, linewidth=1.4)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric_name)
    ax.set_title(f"Validation {metric_name}")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_confusion(matrix, labels, path, title="Confusion counts"):
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(5.5, 5), dpi=FIG_DPI)
    im = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels, rotation=40, ha="right",
                  fontsize=8)
    ax.set_yticks(range(len(labels)), labels, fontsize=8)
    ax.set_xlabel("prediction")
    ax.set_ylabel("truth")
    ax.set_title(title)
    vmax = matrix.max() if matrix.size else 1
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            color = "white" if matrix[i, j] > 0.6 * vmax else "black"
            ax.text(j, i, str(int(matrix[i, j])), ha="center", va="center",
                    color=color, fontsize=9)
    fig.colorbar(im, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
