"""Figures written next to the CSV reports (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bench(traces: dict[str, np.ndarray], path) -> Path:
    """Mean pseudo-label accuracy per epoch for each labeler."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, trace in traces.items():
        ax.plot(np.arange(len(trace)), trace, label=method)
    ax.set_xlabel("epoch")
    ax.set_ylabel("pseudo-label ACC")
    ax.set_ylim(0, 1.02)
    ax.legend()
    return _save(fig, path)


def plot_vocabulary_curve(gammas, sizes, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(list(gammas), list(sizes), marker="o")
    ax.set_xlabel("hierarchy depth threshold")
    ax.set_ylabel("semantic space size")
    return _save(fig, path)


def plot_loss_curve(history, path) -> Path:
    """Per-step total and component losses from a list of LossBreakdown."""
    steps = np.arange(1, len(history) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for attr, label in (("l_total", "total"), ("l_image", "image"), ("l_instance", "instance"),
                        ("l_prototype", "prototype"), ("l_semantic", "semantic")):
        ax.plot(steps, [getattr(h, attr) for h in history], label=label, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    return _save(fig, path)
