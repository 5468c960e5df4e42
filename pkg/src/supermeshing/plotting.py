"""PNG figures for reports: error histograms, case panels and loss curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable between runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_histograms(path, reports, bins=None):
    """Per-variant counts of per-case MAE on a log x axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for r in reports:
        hist = r.histogram(bins)
        centres = np.sqrt(hist.edges[:-1] * hist.edges[1:])
        ax.step(centres, hist.counts, where="mid", label=f"{r.variant} {r.scale}x")
    ax.set_xscale("log")
    ax.set_xlabel("per-case MAE")
    ax.set_ylabel("cases")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_case_panel(path, lr, pred, truth, title=""):
    """Input, prediction, truth and absolute error side by side in grayscale."""
    lr, pred, truth = (np.squeeze(np.asarray(a, dtype=np.float64)) for a in (lr, pred, truth))
    err = np.abs(pred - truth)
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
    panels = [("input", lr, (0, 1)), ("prediction", pred, (0, 1)), ("truth", truth, (0, 1)),
              ("|error|", err, (0, max(float(err.max()), 1e-12)))]
    for ax, (name, img, (vmin, vmax)) in zip(axes, panels):
        im = ax.imshow(img, cmap="gray", vmin=vmin, vmax=vmax, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.03)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curves(path, record):
    """Train and validation total loss against epoch, log scale."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for split, style in (("train", "-"), ("val", "--")):
        epochs = [e.epoch for e in record.epochs if e.split == split]
        ax.plot(epochs, record.curve(split), style, label=split)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
