"""Prototype bank and every distance-based quantity.

A bank holds C*K prototypes in feature space, ``protos[i, j]`` being
prototype j of class i. The class discriminant is the negated squared
Euclidean distance to the nearest prototype of that class; prediction
assigns a feature to the class of its globally nearest prototype.

Tie rule everywhere: equidistant prototypes resolve to the lowest class
id, then the lowest prototype index (row-major argmin order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass
class PrototypeBank:
    protos: np.ndarray   # (C, K, d) float64

    def __post_init__(self):
        self.protos = np.asarray(self.protos, dtype=np.float64)
        if self.protos.ndim != 3:
            raise ParameterError(
                f"prototypes must be (C, K, d), got shape {self.protos.shape}")
        if not np.all(np.isfinite(self.protos)):
            raise ParameterError("prototypes contain non-finite values")

    @property
    def num_classes(self) -> int:
        return self.protos.shape[0]

    @property
    def per_class(self) -> int:
        return self.protos.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.protos.shape[2]


@dataclass
class Prediction:
    class_id: int
    proto_index: int
    sq_distance: float


def squared_distance(f: np.ndarray, m: np.ndarray) -> float:
    f = np.asarray(f, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if f.shape != m.shape:
        raise ParameterError(f"dimension mismatch: {f.shape} vs {m.shape}")
    diff = f - m
    return float(diff @ diff)


def squared_distances(bank: PrototypeBank, f: np.ndarray) -> np.ndarray:
    """All C*K squared distances from f, as a (C, K) matrix."""
    diff = bank.protos - np.asarray(f, dtype=np.float64)
    if diff.shape[-1] != bank.feature_dim:
        raise ParameterError(
            f"feature dim {np.shape(f)} does not match bank dim {bank.feature_dim}")
    return np.einsum("ckd,ckd->ck", diff, diff)


def batch_squared_distances(bank: PrototypeBank, feats: np.ndarray) -> np.ndarray:
    """Squared distances for a feature batch, as (n, C, K).

    Uses the |f|^2 - 2 f.m + |m|^2 expansion so the heavy part is one
    matmul; tiny negatives from cancellation are clamped to zero.
    """
    feats = np.asarray(feats, dtype=np.float64)
    flat = bank.protos.reshape(-1, bank.feature_dim)
    d2 = (np.sum(feats**2, axis=1)[:, None]
          - 2.0 * feats @ flat.T
          + np.sum(flat**2, axis=1)[None, :])
    np.maximum(d2, 0.0, out=d2)
    return d2.reshape(len(feats), bank.num_classes, bank.per_class)


def discriminant(bank: PrototypeBank, f: np.ndarray, class_id: int) -> float:
    """g_i(f) = -min_j ||f - m_ij||^2; always <= 0."""
    if not 0 <= class_id < bank.num_classes:
        raise ParameterError(
            f"class {class_id} out of range [0, {bank.num_classes})")
    return -float(squared_distances(bank, f)[class_id].min())


def predict(bank: PrototypeBank, f: np.ndarray) -> Prediction:
    """Class of the globally nearest prototype."""
    d2 = squared_distances(bank, f)
    flat = int(np.argmin(d2))
    i, j = divmod(flat, bank.per_class)
    return Prediction(i, j, float(d2[i, j]))


def predict_batch(bank: PrototypeBank, feats: np.ndarray):
    """Vectorized predict: returns (class_ids, proto_indices, sq_distances)."""
    d2 = batch_squared_distances(bank, feats).reshape(len(feats), -1)
    flat = np.argmin(d2, axis=1)
    return (flat // bank.per_class, flat % bank.per_class,
            d2[np.arange(len(feats)), flat])


def prototype_probabilities(bank: PrototypeBank, f: np.ndarray, gamma: float):
    """Distance-softmax assignment probabilities.

    Returns the (C, K) matrix p(f in m_ij) = softmax(-gamma * d_ij) over
    all prototypes, and the (C,) per-class sums p(y). Computed with a
    max shift so large distances cannot overflow.
    """
    if gamma <= 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    z = -gamma * squared_distances(bank, f)
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return p, p.sum(axis=1)


def batch_class_probabilities(bank: PrototypeBank, feats: np.ndarray,
                              gamma: float) -> np.ndarray:
    """Per-class probabilities for a feature batch, as (n, C)."""
    if gamma <= 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    z = -gamma * batch_squared_distances(bank, feats).reshape(len(feats), -1)
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p.reshape(len(feats), bank.num_classes, bank.per_class).sum(axis=2)


@dataclass
class GenuineRival:
    """Nearest genuine-class prototype and nearest prototype of any other
    class, with their squared distances."""
    genuine: tuple[int, int]
    rival: tuple[int, int]
    d_genuine: float
    d_rival: float


def nearest_genuine_and_rival(bank: PrototypeBank, f: np.ndarray,
                              y: int) -> GenuineRival:
    if bank.num_classes < 2:
        raise ParameterError("no rival class exists: bank has a single class")
    if not 0 <= y < bank.num_classes:
        raise ParameterError(f"label {y} out of range [0, {bank.num_classes})")
    d2 = squared_distances(bank, f)
    gj = int(np.argmin(d2[y]))
    masked = d2.copy()
    masked[y] = np.inf
    flat = int(np.argmin(masked))
    ri, rj = divmod(flat, bank.per_class)
    return GenuineRival((y, gj), (ri, rj), float(d2[y, gj]), float(d2[ri, rj]))


def init_prototypes(num_classes: int, per_class: int, feature_dim: int,
                    mode: str = "zeros", features=None, seed: int = 0,
                    random_scale: float = 0.01) -> PrototypeBank:
    """Build a fresh bank.

    mode "zeros": every entry 0. mode "gaussian": i.i.d. N(0, random_scale^2)
    entries. mode "class_means": prototype = mean of the supplied per-class
    feature list; with per_class > 1 the remaining prototypes are the mean
    plus seeded N(0, 0.01*I) jitter so they start distinct.
    """
    if num_classes < 1 or per_class < 1 or feature_dim < 1:
        raise ParameterError("num_classes, per_class, feature_dim must be >= 1")
    if mode == "zeros":
        protos = np.zeros((num_classes, per_class, feature_dim))
    elif mode == "gaussian":
        rng = np.random.default_rng(seed)
        protos = rng.standard_normal(
            (num_classes, per_class, feature_dim)) * random_scale
    elif mode == "class_means":
        if features is None or len(features) != num_classes:
            raise ParameterError(
                "class_means mode needs one feature list per class")
        rng = np.random.default_rng(seed)
        protos = np.empty((num_classes, per_class, feature_dim))
        for cls, feats in enumerate(features):
            feats = np.asarray(feats, dtype=np.float64)
            if feats.ndim != 2 or len(feats) == 0:
                raise ParameterError(
                    f"class {cls}: class_means mode needs a nonempty (m, d) array")
            mean = feats.mean(axis=0)
            protos[cls, 0] = mean
            for j in range(1, per_class):
                protos[cls, j] = mean + rng.standard_normal(feature_dim) * 0.1
    else:
        raise ParameterError(f"unknown prototype init mode {mode!r}")
    return PrototypeBank(protos)


def _kmeans(feats: np.ndarray, k: int, seed: int, iterations: int = 20) -> np.ndarray:
    """Plain Lloyd iterations with seeded initial centers; empty clusters
    keep their previous center."""
    rng = np.random.default_rng(seed)
    centers = feats[rng.choice(len(feats), size=k, replace=len(feats) < k)].copy()
    for _ in range(iterations):
        d2 = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        for j in range(k):
            members = feats[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers


def add_class_prototype(bank: PrototypeBank, new_class_features,
                        seed: int = 0) -> PrototypeBank:
    """Return a bank extended by one class without touching old entries.

    The new class gets the feature mean for K = 1, or K seeded k-means
    centers of the features for K > 1.
    """
    feats = np.asarray(new_class_features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ParameterError("new_class_features must be a nonempty (m, d) array")
    if feats.shape[1] != bank.feature_dim:
        raise ParameterError(
            f"feature dim {feats.shape[1]} does not match bank dim {bank.feature_dim}")
    k = bank.per_class
    if k == 1:
        new = feats.mean(axis=0)[None, :]
    else:
        new = _kmeans(feats, k, seed)
    protos = np.concatenate([bank.protos, new[None, :, :]], axis=0)
    return PrototypeBank(protos)
