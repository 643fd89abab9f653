"""Figure rendering for CLI report paths. Every plot lands next to its
CSV as a PNG; rendering is optional and nothing else imports this."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    tmp = os.fspath(path) + ".tmp"
    fig.savefig(tmp, format="png", dpi=120, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)


def plot_metrics(history, path) -> None:
    """Loss and accuracy vs epoch, one line per split."""
    splits = sorted({row.split for row in history})
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for split in splits:
        rows = [r for r in history if r.split == split]
        epochs = [r.epoch for r in rows]
        ax_loss.plot(epochs, [r.loss for r in rows], label=split)
        ax_acc.plot(epochs, [r.accuracy for r in rows], label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    _save(fig, path)


def plot_curve(curve, path) -> None:
    """AR/RR against the threshold sweep plus the RR-vs-AR tradeoff."""
    fig, (ax_t, ax_x) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_t.plot(curve.thresholds, curve.ar, label="acceptance rate")
    ax_t.plot(curve.thresholds, curve.rr, label="rejection rate")
    ax_t.set_xlabel(f"threshold ({curve.mode})")
    ax_t.set_ylabel("rate")
    ax_t.legend()
    ax_x.step(curve.ar, curve.rr, where="post")
    ax_x.set_xlabel("acceptance rate")
    ax_x.set_ylabel("rejection rate")
    _save(fig, path)


def plot_features(labels, feats, protos, path) -> None:
    """Scatter of the first two feature dimensions, prototypes as X."""
    feats = np.asarray(feats)
    if feats.shape[1] == 1:
        feats = np.hstack([feats, np.zeros_like(feats)])
        protos = np.concatenate(
            [protos, np.zeros_like(protos)], axis=-1) if protos is not None else None
    fig, ax = plt.subplots(figsize=(5, 5))
    labels = np.asarray(labels)
    for cls in np.unique(labels):
        pts = feats[labels == cls]
        ax.scatter(pts[:, 0], pts[:, 1], s=4, alpha=0.5, label=str(cls))
    if protos is not None:
        flat = np.asarray(protos).reshape(-1, protos.shape[-1])
        ax.scatter(flat[:, 0], flat[:, 1], marker="x", s=60, c="black")
    ax.set_xlabel("f1")
    ax.set_ylabel("f2")
    if len(np.unique(labels)) <= 12:
        ax.legend(markerscale=2, fontsize=8)
    _save(fig, path)
