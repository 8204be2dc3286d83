"""Figure rendering for evaluation reports and alignment inspection.

Everything draws straight to files through the Agg backend, so no display
is needed. Metric code stays plot-free; this module only consumes the
structures produced elsewhere (EvalReport confusion matrices, explain
output, training history).
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _draw_confusion(ax, confusion, labels, title, normalize):
    m = np.asarray(confusion, dtype=np.float64)
    if normalize:
        rows = m.sum(axis=1, keepdims=True)
        m = np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)
    im = ax.imshow(m, cmap="Blues", aspect="equal")
    ax.set_xticks(range(len(labels)))
    ax.set_yticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    return im


def save_confusion_heatmap(path, confusion, labels, title="", normalize=True):
    """Render one confusion matrix as a heatmap PNG.

    Rows are true labels, columns predicted. With normalize=True each row
    is scaled to sum to 1 so class imbalance does not hide structure.
    """
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(labels) + 1.5),) * 2)
    im = _draw_confusion(ax, confusion, labels, title, normalize)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_rater_model_panel(path, rater_confusion, model_confusion, labels, normalize=True):
    """Side-by-side confusion heatmaps: human raters left, model right."""
    w = max(4.0, 0.35 * len(labels) + 1.5)
    fig, axes = plt.subplots(1, 2, figsize=(2 * w + 1.0, w))
    _draw_confusion(axes[0], rater_confusion, labels, "raters", normalize)
    im = _draw_confusion(axes[1], model_confusion, labels, "model", normalize)
    fig.colorbar(im, ax=list(axes), fraction=0.025)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_alignment_heatmap(path, weights, arg1_tokens, arg2_tokens, title=""):
    """Attention weights with arg1 tokens on the y axis and arg2 on the x
    axis; darker cells carry more weight."""
    m = np.asarray(weights, dtype=np.float64)
    if m.shape != (len(arg1_tokens), len(arg2_tokens)):
        raise ValueError(
            "weight shape %s does not match token counts (%d, %d)"
            % (m.shape, len(arg1_tokens), len(arg2_tokens))
        )
    fig, ax = plt.subplots(
        figsize=(max(3.0, 0.4 * len(arg2_tokens) + 1.5), max(2.5, 0.4 * len(arg1_tokens) + 1.0))
    )
    ax.imshow(m, cmap="Greys", aspect="auto", vmin=0.0)
    ax.set_xticks(range(len(arg2_tokens)))
    ax.set_yticks(range(len(arg1_tokens)))
    ax.set_xticklabels(arg2_tokens, rotation=90, fontsize=8)
    ax.set_yticklabels(arg1_tokens, fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_curve(path, history):
    """Loss per step, with dev macro-F1 on a second axis where logged."""
    steps = [h.step for h in history]
    losses = [h.loss for h in history]
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    ax.plot(steps, losses, lw=0.8, color="tab:blue", label="train loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    evals = [(h.step, h.dev_macro_f1) for h in history if h.dev_macro_f1 is not None]
    if evals:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evals), "o-", ms=3, lw=0.8, color="tab:orange", label="dev macro-F1")
        ax2.set_ylabel("dev macro-F1")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
