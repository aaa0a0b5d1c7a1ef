"""Figure rendering for training logs and evaluation reports.

Uses the non-interactive backend so files render identically with no
display attached.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from metatrack.maml import TrainLog  # noqa: E402
from metatrack.metrics import EvalReport  # noqa: E402

__all__ = ["save_train_curves", "save_eval_chart"]


def save_train_curves(log: TrainLog, path) -> Path:
    """Meta-loss and meta-gradient norm per epoch, one panel each."""
    path = Path(path)
    epochs = [e.epoch for e in log.epochs]
    losses = [e.meta_loss for e in log.epochs]
    norms = [e.grad_norm for e in log.epochs]
    eval_losses = [e.eval_loss for e in log.epochs]

    fig, (ax_loss, ax_norm) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, losses, marker=".", label="train batches")
    if epochs and np.any(np.isfinite(eval_losses)):
        ax_loss.plot(epochs, eval_losses, marker=".", label="fixed eval batch")
        ax_loss.legend()
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("adapted query loss")
    ax_loss.set_title("meta-loss")
    ax_norm.plot(epochs, norms, marker=".", color="tab:orange")
    ax_norm.set_xlabel("epoch")
    ax_norm.set_ylabel("L2 norm")
    ax_norm.set_title("meta-gradient norm")
    if log.aborted:
        fig.suptitle("training aborted on non-finite update", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def save_eval_chart(report: EvalReport, path) -> Path:
    """Grouped bars of MOTA and IDF1 per sequence plus the pooled scores."""
    path = Path(path)
    names = list(report.sequences)
    if len(names) != 1:
        names.append("OVERALL")
    scores = dict(report.sequences)
    scores["OVERALL"] = report.overall
    motas = [scores[n].clear.mota for n in names]
    idf1s = [scores[n].ids.idf1 for n in names]

    x = np.arange(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(names), 3.8))
    ax.bar(x - width / 2, motas, width, label="MOTA")
    ax.bar(x + width / 2, idf1s, width, label="IDF1")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"tracking scores (IoU threshold {report.iou_threshold:g})")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
