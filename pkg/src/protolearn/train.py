"""Joint SGD training of the feature extractor and prototype bank,
evaluation, finite-difference gradient checking, and checkpoint IO.

Each step runs one forward pass, computes the batch-mean combined loss
and its gradients, backpropagates through the network, and then updates
network weights and the touched prototypes simultaneously (all grads
taken at the pre-step values, same learning rate for both). Serial runs
are bit-deterministic for a fixed config and datasets.

Checkpoints use a small binary container with a trailing CRC-32; see
``save_model`` for the byte layout. Training history goes to a separate
metrics CSV.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .data import Dataset, batches
from .errors import (CheckpointCRCError, CheckpointError, CheckpointMagicError,
                     CheckpointTruncatedError, CheckpointVersionError,
                     NumericError, ParameterError)
from .losses import LossHyper
from .net import (DEFAULT_ARCH, ArchSpec, FcSpec, Network, backward, forward,
                  init_network, parse_arch, sgd_step)
from .proto import (PrototypeBank, batch_squared_distances, init_prototypes,
                    predict_batch, squared_distances)

CHECKPOINT_MAGIC = b"CPL1"
CHECKPOINT_VERSION = 1

PROTO_INIT_MODES = ("zeros", "class_means", "gaussian")


@dataclass
class TrainConfig:
    """Everything a run needs. arch is kept in text form; when feat_dim
    is set it overrides the width of the final fc layer."""
    arch: str = DEFAULT_ARCH
    loss: str = "dce"
    hyper: LossHyper = field(default_factory=LossHyper)
    k: int = 1
    feat_dim: int | None = None
    learning_rate: float = 0.001
    batch_size: int = 50
    epochs: int = 20
    seed: int = 0
    proto_init: str = "zeros"
    subsample_fraction: float | None = None
    lr_decay: float = 1.0   # per-epoch multiplier; 1.0 = constant rate

    def validate(self) -> None:
        if self.loss not in losses.LOSS_KINDS:
            raise ParameterError(
                f"unknown loss {self.loss!r}, expected one of {losses.LOSS_KINDS}")
        if self.learning_rate <= 0:
            raise ParameterError(
                f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if not 0 < self.lr_decay <= 1:
            raise ParameterError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.proto_init not in PROTO_INIT_MODES:
            raise ParameterError(
                f"unknown proto_init {self.proto_init!r}, "
                f"expected one of {PROTO_INIT_MODES}")
        if self.subsample_fraction is not None and not 0 < self.subsample_fraction <= 1:
            raise ParameterError(
                f"subsample_fraction must be in (0, 1], got {self.subsample_fraction}")

    def resolved_arch(self) -> ArchSpec:
        spec = parse_arch(self.arch)
        if self.feat_dim is not None and self.feat_dim != spec.feature_dim:
            if self.feat_dim < 1:
                raise ParameterError(f"feat_dim must be >= 1, got {self.feat_dim}")
            layers = list(spec.layers)
            layers[-1] = FcSpec(self.feat_dim)
            spec = parse_arch(";".join(l.text() for l in layers))
        return spec


@dataclass
class EpochStats:
    epoch: int
    split: str
    loss: float
    accuracy: float


@dataclass
class Model:
    net: Network
    bank: PrototypeBank
    config: TrainConfig
    history: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.bank.num_classes


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray   # (C, C) counts, rows = true class
    mean_loss: float


def extract_features(net: Network, pixels: np.ndarray,
                     chunk: int = 512) -> np.ndarray:
    """Forward a full array of images in chunks; returns (n, d)."""
    if len(pixels) == 0:
        return np.zeros((0, net.feature_dim))
    parts = [forward(net, pixels[i:i + chunk])
             for i in range(0, len(pixels), chunk)]
    return np.concatenate(parts, axis=0)


def _initial_bank(config: TrainConfig, net: Network, train_set: Dataset,
                  num_classes: int) -> PrototypeBank:
    d = net.feature_dim
    # prototype draws use seed+1 so they do not share the net-init stream
    if config.proto_init == "class_means":
        feats = extract_features(net, train_set.pixels)
        per_class = [feats[train_set.labels == c] for c in range(num_classes)]
        for c, fc in enumerate(per_class):
            if len(fc) == 0:
                raise ParameterError(
                    f"class_means init: no training samples for class {c}")
        return init_prototypes(num_classes, config.k, d, "class_means",
                               features=per_class, seed=config.seed + 1)
    return init_prototypes(num_classes, config.k, d, config.proto_init,
                           seed=config.seed + 1)


def train(config: TrainConfig, train_set: Dataset,
          eval_set: Dataset | None = None) -> Model:
    """Run the full training loop and return the trained model.

    History gets one "train" row per epoch (running mean loss and
    accuracy measured on the pre-update model at each step) and, when an
    eval set is given, one "test" row per epoch.
    """
    config.validate()
    if len(train_set) == 0:
        raise ParameterError("train_set is empty")
    if train_set.labels is None:
        raise ParameterError("train_set has no labels")
    num_classes = train_set.num_classes
    if num_classes < 2:
        raise ParameterError(
            "rival class required: training needs at least 2 classes")

    arch = config.resolved_arch()
    net = init_network(arch, config.seed)
    bank = _initial_bank(config, net, train_set, num_classes)
    model = Model(net, bank, config)

    lr = config.learning_rate
    for epoch in range(config.epochs):
        loss_sum = 0.0
        hit_sum = 0
        seen = 0
        for step, batch in enumerate(
                batches(train_set, config.batch_size, config.seed, True, epoch)):
            feats, cache = forward(net, batch.pixels, want_cache=True)
            mean_loss, d_feats, d_bank = losses.batch_combined_loss_grad(
                config.loss, feats, batch.labels, bank, config.hyper)
            if not np.isfinite(mean_loss):
                raise NumericError(
                    f"non-finite loss {mean_loss} at epoch {epoch} step {step}")
            pred_cls = predict_batch(bank, feats)[0]
            grads = backward(net, cache, d_feats)
            sgd_step(net.params, grads, lr)
            bank.protos -= lr * d_bank
            loss_sum += mean_loss * len(batch)
            hit_sum += int((pred_cls == batch.labels).sum())
            seen += len(batch)
        model.history.append(EpochStats(
            epoch, "train", loss_sum / seen, hit_sum / seen))
        if eval_set is not None:
            report = evaluate(model, eval_set)
            model.history.append(EpochStats(
                epoch, "test", report.mean_loss, report.accuracy))
        lr *= config.lr_decay
    return model


def evaluate(model: Model, dataset: Dataset) -> EvalReport:
    """Nearest-prototype accuracy, confusion counts, and mean loss."""
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate an empty dataset")
    if dataset.labels is None:
        raise ParameterError("evaluation dataset has no labels")
    c = model.bank.num_classes
    if dataset.labels.max() >= c:
        raise ParameterError(
            f"dataset label {int(dataset.labels.max())} out of range for "
            f"{c}-class model")
    feats = extract_features(model.net, dataset.pixels)
    pred = predict_batch(model.bank, feats)[0]
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, pred), 1)
    accuracy = float(np.trace(confusion)) / len(dataset)
    values = losses.loss_values(model.config.loss, feats, dataset.labels,
                                model.bank, model.config.hyper)
    return EvalReport(accuracy, confusion, float(values.mean()))


def mean_genuine_distance(model: Model, dataset: Dataset) -> float:
    """Mean squared distance from each feature to its nearest genuine
    prototype; the compactness statistic the PL term pushes down."""
    feats = extract_features(model.net, dataset.pixels)
    d2 = batch_squared_distances(model.bank, feats)
    genuine = d2[np.arange(len(feats)), dataset.labels].min(axis=1)
    return float(genuine.mean())


# ---------------------------------------------------------------------------
# gradient checking

GRADCHECK_KINDS = losses.LOSS_KINDS + ("pl", "combined")


@dataclass
class GradCheckReport:
    kind: str
    trials: int
    max_rel_error: float
    tolerance: float
    passed: bool
    skipped: int   # instances rejected for sitting near a kink or tie


def _loss_value(kind: str, f, y, bank, hyper) -> float:
    if kind == "pl":
        return losses.pl_loss_grad(f, y, bank).loss
    if kind == "combined":
        raise ParameterError("combined needs an explicit base kind")
    return losses.classification_loss_grad(kind, f, y, bank, hyper).loss


def _loss_grad(kind: str, f, y, bank, hyper):
    if kind == "pl":
        return losses.pl_loss_grad(f, y, bank)
    return losses.classification_loss_grad(kind, f, y, bank, hyper)


def _near_kink(kind: str, f, y, bank, hyper, gap: float = 1e-3) -> bool:
    """True when the instance sits too close to a selection tie or a
    hinge activation boundary for central differences to be trusted."""
    d2 = squared_distances(bank, f)
    if kind != "dce":
        # genuine selection tie
        dy = np.sort(d2[y].ravel())
        if len(dy) > 1 and dy[1] - dy[0] < gap:
            return True
    if kind in ("mce", "mcl", "gmcl"):
        rival = np.delete(d2, y, axis=0).ravel()
        rival.sort()
        if len(rival) > 1 and rival[1] - rival[0] < gap:
            return True
        d_g, d_r = d2[y].min(), rival[0]
        if kind == "mcl" and abs(d_g - d_r + hyper.resolved_margin("mcl")) < gap:
            return True
        if kind == "gmcl":
            ratio = (d_g - d_r) / (d_g + d_r + losses.GMCL_EPS)
            if abs(ratio + hyper.resolved_margin("gmcl")) < gap:
                return True
    return False


def gradient_check(kind: str, trials: int = 100, step: float = 1e-5,
                   tolerance: float = 1e-6, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences on
    random small instances (d <= 8, C <= 4, K <= 3).

    "combined" draws a random base loss per trial with a nonzero PL
    weight. Instances within 1e-3 of a hinge boundary or selection tie
    are redrawn, not checked.
    """
    if step <= 0:
        raise ParameterError(f"step must be > 0, got {step}")
    if kind not in GRADCHECK_KINDS:
        raise ParameterError(
            f"unknown loss {kind!r}, expected one of {GRADCHECK_KINDS}")
    rng = np.random.default_rng(seed)
    max_err = 0.0
    used = 0
    skipped = 0
    while used < trials:
        d = int(rng.integers(2, 9))
        c = int(rng.integers(2, 5))
        k = int(rng.integers(1, 4))
        bank = PrototypeBank(rng.normal(0.0, 1.0, (c, k, d)))
        f = rng.normal(0.0, 1.0, d)
        y = int(rng.integers(0, c))
        hyper = LossHyper(xi=float(rng.uniform(0.5, 2.0)),
                          margin=None,
                          gamma=float(rng.uniform(0.5, 2.0)),
                          pl_weight=0.0)
        if kind == "combined":
            base = losses.LOSS_KINDS[int(rng.integers(0, 4))]
            hyper = replace(hyper, pl_weight=float(rng.uniform(0.1, 1.0)))
        else:
            base = kind
        kink_kind = base if base != "pl" else "pl"
        if _near_kink(kink_kind, f, y, bank, hyper):
            skipped += 1
            continue

        def value(fv, protos):
            b = PrototypeBank(protos)
            v = _loss_value(base, fv, y, b, hyper) if kind != "combined" else \
                losses.combined_loss_grad(base, fv, y, b, hyper).loss
            return v

        if kind == "combined":
            analytic = losses.combined_loss_grad(base, f, y, bank, hyper)
        else:
            analytic = _loss_grad(base, f, y, bank, hyper)

        err = 0.0
        for t in range(d):
            fp = f.copy(); fp[t] += step
            fm = f.copy(); fm[t] -= step
            num = (value(fp, bank.protos) - value(fm, bank.protos)) / (2 * step)
            err = max(err, _rel_err(analytic.d_feature[t], num))
        dense = np.zeros_like(bank.protos)
        for key, g in analytic.d_protos.items():
            dense[key] += g
        for i in range(c):
            for j in range(k):
                for t in range(d):
                    pp = bank.protos.copy(); pp[i, j, t] += step
                    pm = bank.protos.copy(); pm[i, j, t] -= step
                    num = (value(f, pp) - value(f, pm)) / (2 * step)
                    err = max(err, _rel_err(dense[i, j, t], num))
        max_err = max(max_err, err)
        used += 1
    return GradCheckReport(kind, used, max_err, tolerance,
                           max_err <= tolerance, skipped)


def _rel_err(a: float, n: float) -> float:
    scale = max(abs(a), abs(n))
    diff = abs(a - n)
    return diff if scale <= 1e-4 else diff / scale


# ---------------------------------------------------------------------------
# persistence

def _pack_u32(x: int) -> bytes:
    return struct.pack("<I", x)


def save_model(model: Model, path) -> bytes:
    """Write the checkpoint and return its bytes.

    Layout, all integers little-endian u32: magic "CPL1", version=1,
    C, K, d, arch byte length, arch UTF-8 text, C*K*d float64 LE
    prototype payload, tensor count, then per tensor (name length,
    name, rank, dims, float64 LE payload), and a trailing CRC-32 of
    everything before it. The write is atomic (temp file + rename).
    """
    bank = model.bank
    arch_text = model.net.arch.text().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, _pack_u32(CHECKPOINT_VERSION),
             _pack_u32(bank.num_classes), _pack_u32(bank.per_class),
             _pack_u32(bank.feature_dim), _pack_u32(len(arch_text)), arch_text,
             np.ascontiguousarray(bank.protos, dtype="<f8").tobytes(),
             _pack_u32(len(model.net.params))]
    for name, tensor in model.net.params.items():
        nb = name.encode("utf-8")
        parts.append(_pack_u32(len(nb)))
        parts.append(nb)
        parts.append(_pack_u32(tensor.ndim))
        for dim in tensor.shape:
            parts.append(_pack_u32(dim))
        parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    blob = b"".join(parts)
    blob += _pack_u32(zlib.crc32(blob) & 0xFFFFFFFF)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return blob


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_model(path, config: TrainConfig | None = None) -> Model:
    """Read a checkpoint written by save_model.

    The file stores only arch text, prototypes, and tensors, so the
    returned model carries the given config (or a default one patched
    with the stored arch) and an empty history.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise CheckpointTruncatedError(
            f"{path}: {len(data)} bytes is too short for a checkpoint")
    magic = data[:4]
    if magic != CHECKPOINT_MAGIC:
        # CPL-tagged but not CPL1 means a format revision we do not read
        if magic[:3] == CHECKPOINT_MAGIC[:3]:
            raise CheckpointVersionError(
                f"{path}: unsupported checkpoint tag {magic!r}, "
                f"this build reads {CHECKPOINT_MAGIC!r}")
        raise CheckpointMagicError(
            f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointCRCError(
            f"{path}: CRC mismatch, stored {stored_crc:#010x} != "
            f"computed {actual_crc:#010x}")
    r = _Reader(data[:-4], path)
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint version {version}")
    c, k, d = r.u32(), r.u32(), r.u32()
    arch_text = r.take(r.u32()).decode("utf-8")
    protos = np.frombuffer(r.take(c * k * d * 8), dtype="<f8").reshape(c, k, d)
    params: dict = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        params[name] = np.frombuffer(
            r.take(count * 8), dtype="<f8").reshape(dims).copy()
    if r.pos != len(r.data):
        raise CheckpointError(
            f"{path}: {len(r.data) - r.pos} unexpected trailing bytes")

    arch = parse_arch(arch_text)
    if arch.feature_dim != d:
        raise CheckpointError(
            f"{path}: feature dim {d} does not match arch output "
            f"{arch.feature_dim}")
    reference = init_network(arch, seed=0)
    if set(params) != set(reference.params):
        raise CheckpointError(
            f"{path}: tensor names do not match the stored architecture")
    for name, tensor in params.items():
        if tensor.shape != reference.params[name].shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tensor.shape}, "
                f"arch implies {reference.params[name].shape}")
    if config is None:
        config = TrainConfig(arch=arch_text)
    net = Network(arch, params)
    return Model(net, PrototypeBank(protos.copy()), config, [])


def write_metrics(history, path) -> None:
    """Write history rows as CSV: epoch,split,loss,accuracy."""
    lines = ["epoch,split,loss,accuracy"]
    for row in history:
        lines.append(f"{row.epoch},{row.split},{row.loss:.17g},{row.accuracy:.17g}")
    text = "\n".join(lines) + "\n"
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# softmax baseline

@dataclass
class SoftmaxModel:
    """Same feature stack with a linear class head; the comparison
    baseline. Predicts by argmax logit."""
    net: Network
    config: TrainConfig
    num_classes: int
    history: list = field(default_factory=list)


def baseline_arch(config: TrainConfig, num_classes: int) -> ArchSpec:
    return parse_arch(config.resolved_arch().text() + f";fc:{num_classes}")


def train_softmax_baseline(config: TrainConfig, train_set: Dataset,
                           eval_set: Dataset | None = None) -> SoftmaxModel:
    """Train the same architecture plus a linear head under softmax
    cross-entropy, with the identical batch schedule and seed."""
    config.validate()
    if len(train_set) == 0:
        raise ParameterError("train_set is empty")
    if train_set.labels is None:
        raise ParameterError("train_set has no labels")
    num_classes = train_set.num_classes
    if num_classes < 2:
        raise ParameterError("softmax baseline needs at least 2 classes")
    net = init_network(baseline_arch(config, num_classes), config.seed)
    model = SoftmaxModel(net, config, num_classes)
    lr = config.learning_rate
    for epoch in range(config.epochs):
        loss_sum = 0.0
        hit_sum = 0
        seen = 0
        for step, batch in enumerate(
                batches(train_set, config.batch_size, config.seed, True, epoch)):
            logits, cache = forward(net, batch.pixels, want_cache=True)
            loss, dlogits = losses.softmax_cross_entropy(logits, batch.labels)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss} at epoch {epoch} step {step}")
            grads = backward(net, cache, dlogits)
            sgd_step(net.params, grads, lr)
            loss_sum += loss * len(batch)
            hit_sum += int((logits.argmax(axis=1) == batch.labels).sum())
            seen += len(batch)
        model.history.append(EpochStats(
            epoch, "train", loss_sum / seen, hit_sum / seen))
        if eval_set is not None:
            report = evaluate_softmax(model, eval_set)
            model.history.append(EpochStats(
                epoch, "test", report.mean_loss, report.accuracy))
        lr *= config.lr_decay
    return model


def evaluate_softmax(model: SoftmaxModel, dataset: Dataset) -> EvalReport:
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate an empty dataset")
    if dataset.labels is None:
        raise ParameterError("evaluation dataset has no labels")
    c = model.num_classes
    if dataset.labels.max() >= c:
        raise ParameterError(
            f"dataset label {int(dataset.labels.max())} out of range for "
            f"{c}-class model")
    logits = extract_features(model.net, dataset.pixels)
    pred = logits.argmax(axis=1)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, pred), 1)
    accuracy = float(np.trace(confusion)) / len(dataset)
    loss, _ = losses.softmax_cross_entropy(logits, dataset.labels)
    return EvalReport(accuracy, confusion, loss)
