"""Per-sample training losses over (feature, label, prototype bank).

Four classification losses are provided plus the prototype-pull
regularizer and their weighted combination:

* ``mce``: sigmoid of the genuine-minus-rival squared-distance gap,
  slope ``xi``; always differentiable, touches 2 prototypes.
* ``mcl``: hinge on the distance gap with an absolute margin; touches
  2 prototypes when active, none otherwise.
* ``gmcl``: hinge on the gap normalized by the distance sum, margin in
  (0,1); scale-free variant of mcl.
* ``dce``: negative log class probability under a distance softmax
  with hardness ``gamma``; touches every prototype.
* ``pl``: squared distance to the nearest genuine-class prototype;
  touches exactly 1 prototype.

Every function returns the scalar loss, the gradient with respect to
the feature vector, and a sparse map of prototype gradients; prototypes
absent from the map have exactly zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .proto import PrototypeBank, nearest_genuine_and_rival, squared_distances

LOSS_KINDS = ("mce", "mcl", "gmcl", "dce")

GMCL_EPS = 1e-12   # guards the ratio denominator when f sits on both prototypes

DEFAULT_MARGINS = {"mcl": 1.0, "gmcl": 0.3}


@dataclass
class LossHyper:
    """Loss hyperparameters. ``margin=None`` picks the per-kind default
    (mcl 1.0, gmcl 0.3). ``pl_weight`` is the prototype-loss weight."""
    xi: float = 1.0
    margin: float | None = None
    gamma: float = 1.0
    pl_weight: float = 0.001

    def resolved_margin(self, kind: str) -> float:
        return DEFAULT_MARGINS[kind] if self.margin is None else self.margin


@dataclass
class LossGrad:
    loss: float
    d_feature: np.ndarray
    d_protos: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


def _sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def mce_loss_grad(f, y: int, bank: PrototypeBank, xi: float = 1.0) -> LossGrad:
    """Sigmoid misclassification loss, slope xi; loss in (0, 1)."""
    if xi <= 0:
        raise ParameterError(f"xi must be positive, got {xi}")
    f = np.asarray(f, dtype=np.float64)
    gr = nearest_genuine_and_rival(bank, f, y)
    m_g = bank.protos[gr.genuine]
    m_r = bank.protos[gr.rival]
    loss = _sigmoid(xi * (gr.d_genuine - gr.d_rival))
    s = 2.0 * xi * loss * (1.0 - loss)
    return LossGrad(
        loss,
        s * (m_r - m_g),
        {gr.genuine: s * (m_g - f), gr.rival: s * (f - m_r)},
    )


def mcl_loss_grad(f, y: int, bank: PrototypeBank, margin: float = 1.0) -> LossGrad:
    """Hinge on the genuine-minus-rival gap with an absolute margin."""
    f = np.asarray(f, dtype=np.float64)
    gr = nearest_genuine_and_rival(bank, f, y)
    loss = gr.d_genuine - gr.d_rival + margin
    if loss <= 0:
        return LossGrad(0.0, np.zeros_like(f))
    m_g = bank.protos[gr.genuine]
    m_r = bank.protos[gr.rival]
    return LossGrad(
        loss,
        2.0 * (m_r - m_g),
        {gr.genuine: 2.0 * (m_g - f), gr.rival: 2.0 * (f - m_r)},
    )


def gmcl_loss_grad(f, y: int, bank: PrototypeBank, margin: float = 0.3) -> LossGrad:
    """Hinge on the normalized gap (d_g - d_r)/(d_g + d_r), margin in (0,1)."""
    if not 0.0 < margin < 1.0:
        raise ParameterError(f"gmcl margin must lie in (0, 1), got {margin}")
    f = np.asarray(f, dtype=np.float64)
    gr = nearest_genuine_and_rival(bank, f, y)
    total = gr.d_genuine + gr.d_rival + GMCL_EPS
    loss = (gr.d_genuine - gr.d_rival) / total + margin
    if loss <= 0:
        return LossGrad(0.0, np.zeros_like(f))
    m_g = bank.protos[gr.genuine]
    m_r = bank.protos[gr.rival]
    # quotient rule through d_g and d_r
    coef_g = (2.0 * gr.d_rival + GMCL_EPS) / total**2
    coef_r = -(2.0 * gr.d_genuine + GMCL_EPS) / total**2
    return LossGrad(
        loss,
        coef_g * 2.0 * (f - m_g) + coef_r * 2.0 * (f - m_r),
        {gr.genuine: coef_g * 2.0 * (m_g - f),
         gr.rival: coef_r * 2.0 * (m_r - f)},
    )


def dce_loss_grad(f, y: int, bank: PrototypeBank, gamma: float = 1.0) -> LossGrad:
    """Negative log class probability under the distance softmax."""
    if gamma <= 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    f = np.asarray(f, dtype=np.float64)
    if not 0 <= y < bank.num_classes:
        raise ParameterError(f"label {y} out of range [0, {bank.num_classes})")
    z = -gamma * squared_distances(bank, f)
    zmax = z.max()
    ez = np.exp(z - zmax)
    total = ez.sum()
    # the genuine-class sum gets its own shift: with a shared shift it
    # can underflow to zero for far-away features, turning the loss into
    # inf and the within-class assignment into nan
    zymax = z[y].max()
    ezy = np.exp(z[y] - zymax)
    genuine = ezy.sum()
    loss = float((np.log(total) + zmax) - (np.log(genuine) + zymax))
    # dL/dz_ij = p_ij - [i == y] * (within-class assignment of z_y)
    w = ez / total
    w[y] -= ezy / genuine
    diff = f - bank.protos                       # (C, K, d)
    d_feature = -2.0 * gamma * np.einsum("ck,ckd->d", w, diff)
    d_m = 2.0 * gamma * w[:, :, None] * diff
    d_protos = {(i, j): d_m[i, j]
                for i in range(bank.num_classes)
                for j in range(bank.per_class)}
    return LossGrad(loss, d_feature, d_protos)


def pl_loss_grad(f, y: int, bank: PrototypeBank) -> LossGrad:
    """Squared distance to the nearest genuine-class prototype."""
    f = np.asarray(f, dtype=np.float64)
    if not 0 <= y < bank.num_classes:
        raise ParameterError(f"label {y} out of range [0, {bank.num_classes})")
    d2 = squared_distances(bank, f)[y]
    j = int(np.argmin(d2))
    m = bank.protos[y, j]
    return LossGrad(float(d2[j]), 2.0 * (f - m), {(y, j): 2.0 * (m - f)})


def classification_loss_grad(kind: str, f, y: int, bank: PrototypeBank,
                             hyper: LossHyper) -> LossGrad:
    if kind == "mce":
        return mce_loss_grad(f, y, bank, hyper.xi)
    if kind == "mcl":
        return mcl_loss_grad(f, y, bank, hyper.resolved_margin("mcl"))
    if kind == "gmcl":
        return gmcl_loss_grad(f, y, bank, hyper.resolved_margin("gmcl"))
    if kind == "dce":
        return dce_loss_grad(f, y, bank, hyper.gamma)
    raise ParameterError(f"unknown loss kind {kind!r}, expected one of {LOSS_KINDS}")


def combined_loss_grad(kind: str, f, y: int, bank: PrototypeBank,
                       hyper: LossHyper) -> LossGrad:
    """Classification loss plus pl_weight times the prototype loss.

    With pl_weight = 0 this is exactly the bare classification loss.
    """
    if hyper.pl_weight < 0:
        raise ParameterError(f"pl_weight must be >= 0, got {hyper.pl_weight}")
    base = classification_loss_grad(kind, f, y, bank, hyper)
    lam = hyper.pl_weight
    if lam == 0:
        return base
    pl = pl_loss_grad(f, y, bank)
    d_protos = dict(base.d_protos)
    for key, g in pl.d_protos.items():
        d_protos[key] = d_protos[key] + lam * g if key in d_protos else lam * g
    return LossGrad(base.loss + lam * pl.loss,
                    base.d_feature + lam * pl.d_feature,
                    d_protos)


def batch_combined_loss_grad(kind: str, feats: np.ndarray, labels: np.ndarray,
                             bank: PrototypeBank, hyper: LossHyper):
    """Mean combined loss over a batch.

    Returns (mean loss, d(mean loss)/d feats as (n, d), d(mean loss)/d
    prototypes as a dense (C, K, d) array; untouched entries are exactly
    zero). dce runs a vectorized path; the margin losses touch too few
    prototypes to be worth it and loop per sample.
    """
    if kind == "dce":
        return _batch_dce_combined(feats, labels, bank, hyper)
    n = len(feats)
    d_feats = np.empty_like(feats)
    d_bank = np.zeros_like(bank.protos)
    total = 0.0
    for i in range(n):
        lg = combined_loss_grad(kind, feats[i], int(labels[i]), bank, hyper)
        total += lg.loss
        d_feats[i] = lg.d_feature
        for (ci, pj), g in lg.d_protos.items():
            d_bank[ci, pj] += g
    d_feats /= n
    d_bank /= n
    return total / n, d_feats, d_bank


def _batch_dce_combined(feats, labels, bank: PrototypeBank, hyper: LossHyper):
    """Whole-batch dce + pl gradients in a handful of matrix products."""
    from .proto import batch_squared_distances

    gamma = hyper.gamma
    if gamma <= 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    lam = hyper.pl_weight
    if lam < 0:
        raise ParameterError(f"pl_weight must be >= 0, got {lam}")
    n = len(feats)
    c, k = bank.num_classes, bank.per_class
    rows = np.arange(n)
    d2 = batch_squared_distances(bank, feats)        # (n, C, K)
    z = -gamma * d2.reshape(n, -1)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    total = ez.sum(axis=1)
    # genuine-class sums use their own shift; see dce_loss_grad
    zy = z.reshape(n, c, k)[rows, labels]            # (n, K)
    zymax = zy.max(axis=1, keepdims=True)
    ezy = np.exp(zy - zymax)
    genuine = ezy.sum(axis=1)
    loss = float(((np.log(total) + zmax[:, 0])
                  - (np.log(genuine) + zymax[:, 0])).mean())
    # dL/dz = p - onehot(y) x (within-class assignment)
    w = ez / total[:, None]
    w = w.reshape(n, c, k)
    w[rows, labels] -= ezy / genuine[:, None]
    flat_protos = bank.protos.reshape(-1, bank.feature_dim)
    # sum_ck w = 0 per sample, so the f term of d_feature drops out
    d_feats = (2.0 * gamma / n) * (w.reshape(n, -1) @ flat_protos)
    d_bank = (2.0 * gamma / n) * (
        np.einsum("nf,nd->fd", w.reshape(n, -1), feats).reshape(c, k, -1)
        - w.sum(axis=0)[:, :, None] * bank.protos)
    if lam > 0:
        dy = d2[rows, labels]                        # (n, K)
        jstar = dy.argmin(axis=1)
        mg = bank.protos[labels, jstar]              # (n, d)
        loss += lam * float(dy[rows, jstar].mean())
        d_feats += (2.0 * lam / n) * (feats - mg)
        np.add.at(d_bank, (labels, jstar), (2.0 * lam / n) * (mg - feats))
    return loss, d_feats, d_bank


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over raw logits (n, C).

    Returns (loss, d loss/d logits). Used by the plain softmax baseline;
    prototype models never call this.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = len(labels)
    rows = np.arange(n)
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    total = ez.sum(axis=1, keepdims=True)
    loss = float(-(z[rows, labels] - np.log(total[:, 0])).mean())
    dlogits = ez / total
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / n


def loss_values(kind: str, feats: np.ndarray, labels: np.ndarray,
                bank: PrototypeBank, hyper: LossHyper) -> np.ndarray:
    """Vectorized per-sample combined loss values (no gradients)."""
    from .proto import batch_squared_distances

    n = len(feats)
    d2 = batch_squared_distances(bank, feats)      # (n, C, K)
    dmin = d2.min(axis=2)                          # (n, C)
    rows = np.arange(n)
    d_y = dmin[rows, labels]
    if kind == "dce":
        z = -hyper.gamma * d2.reshape(n, -1)
        zmax = z.max(axis=1, keepdims=True)
        log_total = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        zy = -hyper.gamma * d2[rows, labels]       # (n, K)
        zymax = zy.max(axis=1, keepdims=True)
        log_genuine = np.log(np.exp(zy - zymax).sum(axis=1)) + zymax[:, 0]
        values = log_total - log_genuine
    else:
        if bank.num_classes < 2:
            raise ParameterError("no rival class exists: bank has a single class")
        masked = dmin.copy()
        masked[rows, labels] = np.inf
        d_r = masked.min(axis=1)
        if kind == "mce":
            t = hyper.xi * (d_y - d_r)
            values = np.where(t >= 0, 1.0 / (1.0 + np.exp(-np.abs(t))),
                              np.exp(-np.abs(t)) / (1.0 + np.exp(-np.abs(t))))
        elif kind == "mcl":
            values = np.maximum(0.0, d_y - d_r + hyper.resolved_margin("mcl"))
        elif kind == "gmcl":
            ratio = (d_y - d_r) / (d_y + d_r + GMCL_EPS)
            values = np.maximum(0.0, ratio + hyper.resolved_margin("gmcl"))
        else:
            raise ParameterError(
                f"unknown loss kind {kind!r}, expected one of {LOSS_KINDS}")
    return values + hyper.pl_weight * d_y
