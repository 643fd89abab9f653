"""Open-set tooling on top of a trained model: confidence scores,
acceptance/rejection tradeoff curves against an outlier pool, and
class-incremental extension without retraining.

Confidence is either the max class probability under the model's
distance softmax ("prob") or the negated minimum squared prototype
distance ("dist"); both are oriented so that higher means more
confident. A rejection curve sweeps thresholds over the observed
confidences: a sample is accepted when its confidence is at or above
the threshold, so AR falls and RR rises as the threshold tightens.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ParameterError
from .proto import add_class_prototype, batch_class_probabilities, \
    batch_squared_distances
from .train import Model, SoftmaxModel, extract_features

MODES = ("prob", "dist")


def confidences(model, pixels: np.ndarray, mode: str = "dist") -> np.ndarray:
    """Per-sample confidence for a batch of images, shape (n,).

    Prototype models support both modes; the softmax baseline only has
    max-probability confidence.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}, expected one of {MODES}")
    if isinstance(model, SoftmaxModel):
        if mode != "prob":
            raise ParameterError(
                "softmax baseline has no prototype distances; use mode 'prob'")
        logits = extract_features(model.net, pixels)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return p.max(axis=1)
    feats = extract_features(model.net, pixels)
    if mode == "prob":
        probs = batch_class_probabilities(model.bank, feats,
                                          model.config.hyper.gamma)
        return probs.max(axis=1)
    d2 = batch_squared_distances(model.bank, feats)
    return -d2.reshape(len(feats), -1).min(axis=1)


def confidence(model, sample: np.ndarray, mode: str = "dist") -> float:
    """Confidence of a single (c, h, w) image."""
    return float(confidences(model, np.asarray(sample)[None], mode)[0])


@dataclass
class RejectionCurve:
    thresholds: np.ndarray   # ascending
    ar: np.ndarray           # acceptance rate on the in-set, non-increasing
    rr: np.ndarray           # rejection rate on the out-set, non-decreasing
    mode: str = "dist"

    def __len__(self) -> int:
        return len(self.thresholds)


def ar_rr_curve(model, in_set: Dataset, out_set: Dataset,
                mode: str = "dist",
                num_thresholds: int | None = None) -> RejectionCurve:
    """Sweep thresholds over the distinct observed confidences.

    AR = fraction of in_set with confidence >= threshold, RR = fraction
    of out_set with confidence < threshold. num_thresholds subsamples
    the sweep evenly (endpoints always kept); None keeps every distinct
    value, reproducing the exact empirical staircase.
    """
    if len(in_set) == 0 or len(out_set) == 0:
        raise ParameterError("in_set and out_set must both be nonempty")
    if num_thresholds is not None and num_thresholds < 2:
        raise ParameterError(
            f"num_thresholds must be >= 2, got {num_thresholds}")
    conf_in = np.sort(confidences(model, in_set.pixels, mode))
    conf_out = np.sort(confidences(model, out_set.pixels, mode))
    thresholds = np.unique(np.concatenate([conf_in, conf_out]))
    if num_thresholds is not None and len(thresholds) > num_thresholds:
        pick = np.unique(np.round(
            np.linspace(0, len(thresholds) - 1, num_thresholds)).astype(int))
        thresholds = thresholds[pick]
    # count of conf >= t is n minus the count strictly below t
    below = np.searchsorted(conf_in, thresholds, side="left")
    ar = (len(conf_in) - below) / len(conf_in)
    rr = np.searchsorted(conf_out, thresholds, side="left") / len(conf_out)
    return RejectionCurve(thresholds, ar, rr, mode)


def write_curve(curve: RejectionCurve, path) -> None:
    """CSV: threshold,ar,rr with 17 significant digits, written atomically."""
    lines = ["threshold,ar,rr"]
    for t, a, r in zip(curve.thresholds, curve.ar, curve.rr):
        lines.append(f"{t:.17g},{a:.17g},{r:.17g}")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def extend_model(model: Model, new_class_pixels: np.ndarray,
                 seed: int = 0) -> Model:
    """Add one class from its raw images without touching the network.

    Features come from a single forward pass; the new class gets the
    feature mean (K = 1) or seeded k-means centers (K > 1). The input
    model is not mutated; the returned model shares its network
    parameters bit-for-bit.
    """
    pixels = np.asarray(new_class_pixels, dtype=np.float64)
    if pixels.ndim != 4 or len(pixels) == 0:
        raise ParameterError(
            "extension needs a nonempty (n, c, h, w) image array")
    feats = extract_features(model.net, pixels)
    new_bank = add_class_prototype(model.bank, feats, seed=seed)
    return Model(model.net, new_bank, model.config, history=[])
