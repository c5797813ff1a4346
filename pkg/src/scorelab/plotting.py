"""PNG figures written next to the CSV/PGM outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_density(counts, bounds, path, title=None):
    """Histogram counts (row 0 = top) as an image with data-space axes."""
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.asarray(counts), cmap="magma", extent=(x_lo, x_hi, y_lo, y_hi),
              interpolation="nearest")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_loss(losses, path, title=None):
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(losses)), losses, lw=0.6)
    if len(losses) >= 50:
        w = max(1, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
        ax.plot(np.arange(w - 1, len(losses)), smooth, lw=1.5)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_bench(reports, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    names = [r.method for r in reports]
    ax.bar(names, [r.mean_ms for r in reports], yerr=[r.std_ms for r in reports], capsize=3)
    ax.set_ylabel("ms per step")
    _save(fig, path)
