"""Figure rendering for CLI outputs.

Every tabular artifact the CLI writes (comparison tables, training
histories) gets a matplotlib figure rendered next to the delimited file.
Rendering always uses the Agg backend so it works headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["save_compare_figure", "save_history_figure"]


def save_compare_figure(rows, path) -> None:
    """Grouped bars of episodic accuracy with CI error bars, one group per (N, K).

    `rows` are dicts with keys loss, n_way, k_shot, mean, ci (failed rows may
    carry mean=None and are skipped).
    """
    rows = [r for r in rows if r.get("mean") is not None]
    if not rows:
        raise ValueError("no successful rows to plot")
    settings = sorted({(r["n_way"], r["k_shot"]) for r in rows})
    losses = sorted({r["loss"] for r in rows})
    width = 0.8 / len(losses)
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(settings), 3.6))
    xs = np.arange(len(settings))
    for li, loss in enumerate(losses):
        means, cis, pos = [], [], []
        for si, setting in enumerate(settings):
            match = [r for r in rows if r["loss"] == loss and (r["n_way"], r["k_shot"]) == setting]
            if match:
                means.append(match[0]["mean"])
                cis.append(match[0]["ci"])
                pos.append(xs[si] + (li - (len(losses) - 1) / 2) * width)
        ax.bar(pos, means, width=width * 0.9, yerr=cis, capsize=3, label=loss)
    ax.set_xticks(xs)
    ax.set_xticklabels([f"{n}-way {k}-shot" for n, k in settings])
    ax.set_ylabel("episodic accuracy")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_history_figure(history, path) -> None:
    """Per-epoch mean batch loss and learning rate on twin axes."""
    epochs = np.arange(len(history.epochs))
    losses = [r.mean_loss for r in history.epochs]
    lrs = [r.lr for r in history.epochs]
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(epochs, losses, color="tab:blue", label="mean batch loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, lrs, color="tab:orange", linestyle="--", label="lr")
    ax2.set_ylabel("learning rate", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
