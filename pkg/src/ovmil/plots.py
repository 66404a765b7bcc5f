"""Report figures written next to the CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "svg.hashsalt": "ovmil",
}


def new(nrows=1, ncols=1, width=5.0, height=3.2):
    with plt.rc_context(STYLE):
        return plt.subplots(nrows=nrows, ncols=ncols, figsize=(width, height), squeeze=False)


def save(fig, path):
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(histories, path):
    """Train/validation loss per epoch, one line pair per fold."""
    fig, ax = new(1, 2, width=8.0)
    colours = plt.get_cmap("tab10")
    for i, hist in enumerate(histories):
        epochs = [r.epoch for r in hist]
        ax[0, 0].plot(epochs, [r.train_loss for r in hist], color=colours(i), lw=1, label=f"fold {i}")
        ax[0, 1].plot(epochs, [r.val_loss for r in hist], color=colours(i), lw=1)
    ax[0, 0].set(title="training loss", xlabel="epoch", ylabel="balanced CE")
    ax[0, 1].set(title="validation loss", xlabel="epoch")
    ax[0, 0].legend(frameon=False)
    return save(fig, path)


def plot_tuning_losses(best_losses, path, label=None):
    fig, ax = new()
    it = np.arange(1, len(best_losses) + 1)
    ax[0, 0].plot(it, best_losses, marker="o", ms=3, lw=1, label=label)
    ax[0, 0].set(xlabel="tuning iteration", ylabel="mean 5-fold validation loss")
    ax[0, 0].set_xticks(it)
    if label:
        ax[0, 0].legend(frameon=False)
    return save(fig, path)


def plot_metric_report(estimates, path, title=None):
    fig, ax = new(width=4.5)
    names = [e.metric.replace("_", " ") for e in estimates]
    means = np.array([e.boot_mean for e in estimates])
    lo = means - np.array([e.ci_low for e in estimates])
    hi = np.array([e.ci_high for e in estimates]) - means
    y = np.arange(len(estimates))
    ax[0, 0].errorbar(means, y, xerr=[lo, hi], fmt="o", capsize=3, color="#1f4e79")
    ax[0, 0].set_yticks(y, names)
    ax[0, 0].set_xlim(0, 1.02)
    ax[0, 0].set_xlabel("bootstrap mean and 95% CI")
    if title:
        ax[0, 0].set_title(title)
    return save(fig, path)


def plot_linear_fit(x, y, fit, path, xlabel="x", ylabel="y"):
    fig, ax = new(width=4.0, height=3.4)
    ax[0, 0].scatter(x, y, s=12, color="#1f4e79")
    xs = np.linspace(np.min(x), np.max(x), 50)
    ax[0, 0].plot(xs, fit.slope * xs + fit.intercept, color="#c0504d", lw=1,
                  label=f"$R^2$ = {fit.r_squared:.3f}")
    ax[0, 0].set(xlabel=xlabel, ylabel=ylabel)
    ax[0, 0].legend(frameon=False)
    return save(fig, path)
