"""Command-line interface.

Subcommands: train, eval, gradcheck, reject, extend, features, synth.
Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure. Output files are written atomically, so a failing run never
leaves a partial file behind. Pass --plot where available to render a
PNG figure next to the CSV output.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import (dataset_from_idx, make_gaussian_blobs, make_uniform_noise,
                   outliers_from_idx, quantize_to_bytes, save_idx_images,
                   save_idx_labels, subsample)
from .errors import (CheckpointError, FormatError, NumericError,
                     ParameterError)
from .losses import LOSS_KINDS, LossHyper
from .net import DEFAULT_ARCH
from .openset import MODES, ar_rr_curve, extend_model, write_curve
from .train import (GRADCHECK_KINDS, Model, TrainConfig, evaluate,
                    extract_features, gradient_check, load_model, save_model,
                    train, write_metrics)

# CLI init names -> bank init modes
PROTO_INIT_FLAGS = {"zeros": "zeros", "mean": "class_means",
                    "random": "gaussian"}

# train flags that a --config file may supply, with their value parsers
_CONFIG_FIELDS = {
    "loss": str, "pl_weight": float, "gamma": float, "xi": float,
    "margin": float, "k": int, "feat_dim": int, "arch": str, "epochs": int,
    "lr": float, "batch_size": int, "seed": int, "proto_init": str,
    "subsample_frac": float, "lr_decay": float, "train_images": str,
    "train_labels": str, "test_images": str, "test_labels": str,
    "out": str, "metrics": str,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ParameterError(message)


def _add_train_parser(sub) -> None:
    p = sub.add_parser(
        "train", help="train a prototype model on IDX data",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--loss", choices=LOSS_KINDS, default="dce",
                   help="classification loss")
    p.add_argument("--pl-weight", type=float, default=0.001,
                   help="weight of the prototype-pull regularizer")
    p.add_argument("--gamma", type=float, default=1.0,
                   help="distance-softmax hardness (dce)")
    p.add_argument("--xi", type=float, default=1.0, help="sigmoid slope (mce)")
    p.add_argument("--margin", type=float, default=None,
                   help="hinge margin; default 1.0 for mcl, 0.3 for gmcl")
    p.add_argument("--k", type=int, default=1, help="prototypes per class")
    p.add_argument("--feat-dim", type=int, default=None,
                   help="override the final layer width of --arch")
    p.add_argument("--arch", default=DEFAULT_ARCH, help="architecture string")
    p.add_argument("--epochs", type=int, default=20, help="training epochs")
    p.add_argument("--lr", type=float, default=0.001, help="learning rate")
    p.add_argument("--batch-size", type=int, default=50, help="batch size")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    p.add_argument("--proto-init", choices=sorted(PROTO_INIT_FLAGS),
                   default="zeros", help="prototype initialization")
    p.add_argument("--subsample-frac", type=float, default=None,
                   help="stratified training-set fraction")
    p.add_argument("--lr-decay", type=float, default=1.0,
                   help="per-epoch learning-rate multiplier")
    p.add_argument("--train-images", required=True, help="IDX image file")
    p.add_argument("--train-labels", required=True, help="IDX label file")
    p.add_argument("--test-images", default=None, help="IDX image file")
    p.add_argument("--test-labels", default=None, help="IDX label file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--metrics", default=None, help="metrics CSV output path")
    p.add_argument("--config", default=None,
                   help="key=value file overlaying unset flags")
    p.add_argument("--plot", action="store_true",
                   help="render metrics figure next to --metrics")
    p.set_defaults(func=_cmd_train)


def _overlay_config(args, argv) -> None:
    """Fill train flags from a key=value file; explicit flags win."""
    if args.config is None:
        return
    given = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    try:
        with open(args.config, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ParameterError(f"--config: cannot read {args.config}: {e}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParameterError(
                f"--config {args.config}:{lineno}: expected key=value, "
                f"got {line!r}")
        key = key.strip()
        attr = key.replace("-", "_")
        if attr not in _CONFIG_FIELDS:
            raise ParameterError(
                f"--config {args.config}:{lineno}: unknown key {key!r}")
        if "--" + key.replace("_", "-") in given:
            continue
        try:
            setattr(args, attr, _CONFIG_FIELDS[attr](value.strip()))
        except ValueError:
            raise ParameterError(
                f"--config {args.config}:{lineno}: bad value for {key!r}: "
                f"{value.strip()!r}") from None


def _train_config(args) -> TrainConfig:
    if args.loss not in LOSS_KINDS:
        raise ParameterError(
            f"--loss: unknown loss {args.loss!r}, expected one of {LOSS_KINDS}")
    if args.proto_init not in PROTO_INIT_FLAGS:
        raise ParameterError(
            f"--proto-init: unknown mode {args.proto_init!r}, expected one of "
            f"{sorted(PROTO_INIT_FLAGS)}")
    hyper = LossHyper(xi=args.xi, margin=args.margin, gamma=args.gamma,
                      pl_weight=args.pl_weight)
    return TrainConfig(
        arch=args.arch, loss=args.loss, hyper=hyper, k=args.k,
        feat_dim=args.feat_dim, learning_rate=args.lr,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
        proto_init=PROTO_INIT_FLAGS[args.proto_init],
        subsample_fraction=args.subsample_frac, lr_decay=args.lr_decay)


def _cmd_train(args, argv) -> int:
    _overlay_config(args, argv)
    config = _train_config(args)
    config.validate()
    train_set = dataset_from_idx(args.train_images, args.train_labels)
    if config.subsample_fraction is not None:
        train_set = subsample(train_set, config.subsample_fraction,
                              seed=config.seed, stratified=True)
    eval_set = None
    if (args.test_images is None) != (args.test_labels is None):
        raise ParameterError(
            "--test-images and --test-labels must be given together")
    if args.test_images is not None:
        eval_set = dataset_from_idx(args.test_images, args.test_labels)
    model = train(config, train_set, eval_set)
    save_model(model, args.out)
    print(f"wrote checkpoint {args.out}")
    if args.metrics:
        write_metrics(model.history, args.metrics)
        print(f"wrote metrics {args.metrics}")
        if args.plot:
            from . import plots
            fig_path = os.path.splitext(args.metrics)[0] + ".png"
            plots.plot_metrics(model.history, fig_path)
            print(f"wrote figure {fig_path}")
    for row in model.history[-2:]:
        print(f"epoch {row.epoch} {row.split} loss={row.loss:.6g} "
              f"accuracy={row.accuracy:.6g}")
    return 0


def _cmd_eval(args, argv) -> int:
    model = load_model(args.model)
    dataset = dataset_from_idx(args.images, args.labels)
    report = evaluate(model, dataset)
    print(f"accuracy={report.accuracy:.17g} mean_loss={report.mean_loss:.17g} "
          f"samples={len(dataset)}")
    return 0


def _cmd_gradcheck(args, argv) -> int:
    kinds = GRADCHECK_KINDS if args.loss == "all" else (args.loss,)
    ok = True
    for kind in kinds:
        report = gradient_check(kind, trials=args.trials, step=args.step,
                                tolerance=args.tol, seed=args.seed)
        status = "pass" if report.passed else "FAIL"
        print(f"{kind}: max relative error {report.max_rel_error:.3e} "
              f"over {report.trials} trials ({status})")
        ok = ok and report.passed
    if not ok:
        raise NumericError("gradient check exceeded tolerance")
    return 0


def _cmd_reject(args, argv) -> int:
    model = load_model(args.model)
    if args.in_labels:
        in_set = dataset_from_idx(args.in_images, args.in_labels)
    else:
        in_set = outliers_from_idx(args.in_images)
    if args.out_images:
        out_set = outliers_from_idx(args.out_images)
    else:
        out_set = make_uniform_noise(args.noise_count, in_set.shape,
                                     seed=args.seed)
    curve = ar_rr_curve(model, in_set, out_set, mode=args.mode,
                        num_thresholds=args.thresholds)
    write_curve(curve, args.curve_out)
    print(f"wrote {len(curve)} thresholds to {args.curve_out}")
    if args.plot:
        from . import plots
        fig_path = os.path.splitext(args.curve_out)[0] + ".png"
        plots.plot_curve(curve, fig_path)
        print(f"wrote figure {fig_path}")
    return 0


def _cmd_extend(args, argv) -> int:
    model = load_model(args.model)
    pixels = outliers_from_idx(args.new_images).pixels
    extended = extend_model(model, pixels, seed=args.seed)
    save_model(extended, args.out)
    print(f"wrote {extended.num_classes}-class checkpoint {args.out}")
    return 0


def dump_features(model: Model, dataset, path) -> None:
    """Write label,f1,...,fd rows (17 significant digits) atomically."""
    feats = extract_features(model.net, dataset.pixels)
    d = model.net.feature_dim
    lines = ["label," + ",".join(f"f{i + 1}" for i in range(d))]
    labels = dataset.labels
    for i in range(len(dataset)):
        row = ",".join(f"{v:.17g}" for v in feats[i])
        lines.append(f"{int(labels[i])},{row}")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _cmd_features(args, argv) -> int:
    model = load_model(args.model)
    dataset = dataset_from_idx(args.images, args.labels)
    dump_features(model, dataset, args.out)
    print(f"wrote {len(dataset)} feature rows to {args.out}")
    if args.plot:
        from . import plots
        feats = extract_features(model.net, dataset.pixels)
        fig_path = os.path.splitext(args.out)[0] + ".png"
        plots.plot_features(dataset.labels, feats, model.bank.protos, fig_path)
        print(f"wrote figure {fig_path}")
    return 0


def _parse_shape(text: str) -> tuple:
    parts = text.split("x")
    if len(parts) != 3:
        raise ParameterError(f"--shape: expected CxHxW, got {text!r}")
    try:
        c, h, w = (int(p) for p in parts)
    except ValueError:
        raise ParameterError(f"--shape: expected integers, got {text!r}") from None
    if c != 1:
        raise ParameterError("--shape: IDX image files are single-channel")
    if h < 1 or w < 1:
        raise ParameterError(f"--shape: non-positive size in {text!r}")
    return (c, h, w)


def _cmd_synth(args, argv) -> int:
    shape = _parse_shape(args.shape)
    if args.kind == "blobs":
        if args.out_labels is None:
            raise ParameterError("--out-labels is required for --kind blobs")
        if args.classes < 2:
            raise ParameterError(f"--classes must be >= 2, got {args.classes}")
        center_seed = args.seed if args.center_seed is None else args.center_seed
        rng = np.random.default_rng([center_seed, 7])
        dim = int(np.prod(shape))
        centers = rng.uniform(0.2, 0.8, size=(args.classes, dim))
        dataset = make_gaussian_blobs(args.classes, args.per_class, shape,
                                      centers, args.sigma, args.seed)
        save_idx_images(quantize_to_bytes(dataset.pixels)[:, 0], args.out_images)
        save_idx_labels(dataset.labels, args.out_labels)
        print(f"wrote {len(dataset)} blob images to {args.out_images}")
        print(f"wrote labels to {args.out_labels}")
    else:
        dataset = make_uniform_noise(args.count, shape, seed=args.seed)
        save_idx_images(quantize_to_bytes(dataset.pixels)[:, 0], args.out_images)
        print(f"wrote {len(dataset)} noise images to {args.out_images}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="protolearn",
                     description="convolutional prototype learning")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train_parser(sub)

    p = sub.add_parser("eval", help="evaluate a checkpoint on IDX data",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--images", required=True, help="IDX image file")
    p.add_argument("--labels", required=True, help="IDX label file")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="compare analytic gradients to finite differences",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--loss", choices=GRADCHECK_KINDS + ("all",),
                   default="all", help="loss to check")
    p.add_argument("--trials", type=int, default=100, help="random instances")
    p.add_argument("--step", type=float, default=1e-5,
                   help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-6,
                   help="max relative error allowed")
    p.add_argument("--seed", type=int, default=0, help="instance seed")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("reject",
                       help="acceptance/rejection sweep against outliers",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--in-images", required=True, help="in-set IDX image file")
    p.add_argument("--in-labels", default=None,
                   help="in-set IDX label file (unused by the sweep)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--out-images", help="outlier IDX image file")
    group.add_argument("--noise-count", type=int,
                       help="generate this many uniform-noise outliers")
    p.add_argument("--mode", choices=MODES, default="dist",
                   help="confidence mode")
    p.add_argument("--thresholds", type=int, default=None,
                   help="subsample the sweep to this many thresholds")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--curve-out", required=True, help="curve CSV output path")
    p.add_argument("--plot", action="store_true",
                   help="render curve figure next to --curve-out")
    p.set_defaults(func=_cmd_reject)

    p = sub.add_parser("extend",
                       help="add a class from new images without retraining",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--new-images", required=True,
                   help="IDX image file for the new class")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for multi-prototype clustering")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=_cmd_extend)

    p = sub.add_parser("features", help="dump per-sample features as CSV",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--images", required=True, help="IDX image file")
    p.add_argument("--labels", required=True, help="IDX label file")
    p.add_argument("--out", required=True, help="feature CSV output path")
    p.add_argument("--plot", action="store_true",
                   help="render scatter figure next to --out")
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("synth", help="generate synthetic IDX datasets",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--kind", choices=("blobs", "noise"), required=True,
                   help="dataset family")
    p.add_argument("--classes", type=int, default=4, help="blob classes")
    p.add_argument("--per-class", type=int, default=100,
                   help="blob images per class")
    p.add_argument("--count", type=int, default=1000, help="noise images")
    p.add_argument("--shape", default="1x28x28", help="image shape CxHxW")
    p.add_argument("--sigma", type=float, default=0.1,
                   help="blob pixel standard deviation")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--center-seed", type=int, default=None,
                   help="blob center seed; fix it while varying --seed to "
                        "draw fresh noise around the same class centers "
                        "(default: --seed)")
    p.add_argument("--out-images", required=True, help="IDX image output path")
    p.add_argument("--out-labels", default=None, help="IDX label output path")
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except ParameterError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
