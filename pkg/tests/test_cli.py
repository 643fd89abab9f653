"""End-to-end command-line pipeline on small synthetic IDX corpora.

Commands run in-process through main(argv), so exit codes and file
side effects are observed exactly as a shell would see them. One test
goes through the installed console script to cover the entry point.
"""

import subprocess
import sys

import numpy as np
import pytest

from protolearn import losses
from protolearn.cli import dump_features, main
from protolearn.data import (load_idx_images, quantize_to_bytes,
                             save_idx_images, save_idx_labels)
from protolearn.losses import LossGrad
from protolearn.proto import predict_batch
from protolearn.train import evaluate, extract_features, load_model

from conftest import TINY_ARCH, as_dataset, blob_images

TRAIN_FLAGS = ["train", "--arch", TINY_ARCH, "--loss", "dce", "--gamma", "2.0",
               "--pl-weight", "1.0", "--lr", "0.05", "--epochs", "12",
               "--batch-size", "20", "--seed", "0"]


def write_idx(dataset, images_path, labels_path=None):
    save_idx_images(quantize_to_bytes(dataset.pixels)[:, 0], images_path)
    if labels_path is not None:
        save_idx_labels(dataset.labels, labels_path)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """IDX train/test files plus a checkpoint trained through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    paths = {
        "train_images": str(root / "train-images.idx"),
        "train_labels": str(root / "train-labels.idx"),
        "test_images": str(root / "test-images.idx"),
        "test_labels": str(root / "test-labels.idx"),
        "model": str(root / "model.bin"),
        "metrics": str(root / "metrics.csv"),
    }
    write_idx(blob_images(per_class=60, seed=0),
              paths["train_images"], paths["train_labels"])
    write_idx(blob_images(per_class=20, seed=1),
              paths["test_images"], paths["test_labels"])
    rc = main(TRAIN_FLAGS + [
        "--train-images", paths["train_images"],
        "--train-labels", paths["train_labels"],
        "--test-images", paths["test_images"],
        "--test-labels", paths["test_labels"],
        "--out", paths["model"], "--metrics", paths["metrics"]])
    assert rc == 0
    return paths


# --- the happy path ----------------------------------------------------------

def test_train_writes_checkpoint_and_metrics(corpus):
    model = load_model(corpus["model"])
    assert model.bank.num_classes == 3
    lines = open(corpus["metrics"]).read().splitlines()
    assert lines[0] == "epoch,split,loss,accuracy"
    assert len(lines) == 1 + 2 * 12    # train and test rows per epoch
    last = lines[-1].split(",")
    assert last[1] == "test"
    assert float(last[3]) >= 0.99


def test_eval_reports_accuracy(corpus, capsys):
    rc = main(["eval", "--model", corpus["model"],
               "--images", corpus["test_images"],
               "--labels", corpus["test_labels"]])
    assert rc == 0
    out = capsys.readouterr().out
    assert "samples=60" in out
    acc = float(out.split("accuracy=")[1].split()[0])
    assert acc >= 0.99


def test_features_csv_reproduces_predictions(corpus, tmp_path):
    out = tmp_path / "feats.csv"
    rc = main(["features", "--model", corpus["model"],
               "--images", corpus["test_images"],
               "--labels", corpus["test_labels"], "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "label,f1,f2"
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    assert len(rows) == 60

    model = load_model(corpus["model"])
    from protolearn.data import dataset_from_idx
    test_set = dataset_from_idx(corpus["test_images"], corpus["test_labels"])
    feats = extract_features(model.net, test_set.pixels)
    # 17 significant digits survive the text round trip bit for bit
    assert np.array_equal(rows[:, 1:], feats)
    assert np.array_equal(rows[:, 0].astype(int), test_set.labels)
    pred_csv = predict_batch(model.bank, rows[:, 1:])[0]
    assert np.array_equal(pred_csv, predict_batch(model.bank, feats)[0])


def test_reject_against_generated_noise(corpus, tmp_path):
    out = tmp_path / "curve.csv"
    rc = main(["reject", "--model", corpus["model"],
               "--in-images", corpus["test_images"],
               "--noise-count", "150", "--seed", "4",
               "--curve-out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "threshold,ar,rr"
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    t, ar, rr = rows[:, 0], rows[:, 1], rows[:, 2]
    assert np.all(np.diff(t) > 0)
    assert np.all(np.diff(ar) <= 0)
    assert np.all(np.diff(rr) >= 0)
    # a 2-d toy extractor separates blobs from uniform noise only partly;
    # the strong rejection claims are exercised on real data elsewhere
    assert np.any((ar >= 0.85) & (rr >= 0.85))


def test_reject_accepts_outlier_file_and_labels(corpus, tmp_path):
    noise_path = tmp_path / "noise.idx"
    rc = main(["synth", "--kind", "noise", "--count", "80",
               "--shape", "1x6x6", "--seed", "3",
               "--out-images", str(noise_path)])
    assert rc == 0
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    rc = main(["reject", "--model", corpus["model"],
               "--in-images", corpus["test_images"],
               "--out-images", str(noise_path), "--curve-out", str(a)])
    assert rc == 0
    # labels are ignored by the sweep, so the curve is unchanged
    rc = main(["reject", "--model", corpus["model"],
               "--in-images", corpus["test_images"],
               "--in-labels", corpus["test_labels"],
               "--out-images", str(noise_path), "--curve-out", str(b)])
    assert rc == 0
    assert a.read_bytes() == b.read_bytes()


def test_extend_adds_a_class(corpus, tmp_path, capsys):
    new_path = tmp_path / "new.idx"
    rc = main(["synth", "--kind", "noise", "--count", "30",
               "--shape", "1x6x6", "--seed", "9",
               "--out-images", str(new_path)])
    assert rc == 0
    out = tmp_path / "bigger.bin"
    rc = main(["extend", "--model", corpus["model"],
               "--new-images", str(new_path), "--out", str(out)])
    assert rc == 0
    assert "4-class" in capsys.readouterr().out
    before = load_model(corpus["model"])
    after = load_model(out)
    assert after.bank.num_classes == 4
    assert np.array_equal(after.bank.protos[:3], before.bank.protos)
    for name in before.net.params:
        assert np.array_equal(after.net.params[name], before.net.params[name])


def test_gradcheck_passes(capsys):
    rc = main(["gradcheck", "--loss", "mce", "--trials", "5"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mce" in out and "pass" in out


def test_synth_blobs_is_deterministic(tmp_path):
    args = ["synth", "--kind", "blobs", "--classes", "3", "--per-class", "10",
            "--shape", "1x6x6", "--sigma", "0.05", "--seed", "2"]
    for tag in ("a", "b"):
        rc = main(args + ["--out-images", str(tmp_path / f"{tag}.idx"),
                          "--out-labels", str(tmp_path / f"{tag}-labels.idx")])
        assert rc == 0
    assert ((tmp_path / "a.idx").read_bytes()
            == (tmp_path / "b.idx").read_bytes())
    assert ((tmp_path / "a-labels.idx").read_bytes()
            == (tmp_path / "b-labels.idx").read_bytes())


def test_synth_center_seed_fixes_task_across_seeds(tmp_path):
    # blob centers follow --seed by default, so two seeds are two different
    # classification tasks; --center-seed pins the task while redrawing noise
    def gen(tag, *extra):
        path = tmp_path / f"{tag}.idx"
        rc = main(["synth", "--kind", "blobs", "--classes", "3",
                   "--per-class", "50", "--shape", "1x6x6", "--sigma", "0.05",
                   *extra, "--out-images", str(path),
                   "--out-labels", str(tmp_path / f"{tag}-labels.idx")])
        assert rc == 0
        return path.read_bytes(), load_idx_images(path)

    a_bytes, a = gen("a", "--seed", "2")
    b_bytes, b = gen("b", "--seed", "5", "--center-seed", "2")
    c_bytes, c = gen("c", "--seed", "5")
    d_bytes, _ = gen("d", "--seed", "2", "--center-seed", "2")

    assert d_bytes == a_bytes
    assert b_bytes != a_bytes and b_bytes != c_bytes

    def class_means(pixels):
        flat = pixels.reshape(3, 50, -1) / 255.0
        return flat.mean(axis=1)

    # same centers: class means agree up to noise-of-the-mean
    assert np.max(np.abs(class_means(a) - class_means(b))) < 0.05
    # different centers: at least one class mean moves a lot
    assert np.max(np.abs(class_means(a) - class_means(c))) > 0.1


def test_plot_flags_render_pngs(corpus, tmp_path):
    metrics = tmp_path / "m.csv"
    model = tmp_path / "m.bin"
    rc = main(["train", "--arch", TINY_ARCH, "--epochs", "1", "--lr", "0.05",
               "--batch-size", "30", "--train-images", corpus["train_images"],
               "--train-labels", corpus["train_labels"],
               "--out", str(model), "--metrics", str(metrics), "--plot"])
    assert rc == 0
    assert (tmp_path / "m.png").stat().st_size > 0

    curve = tmp_path / "curve.csv"
    rc = main(["reject", "--model", corpus["model"],
               "--in-images", corpus["test_images"],
               "--noise-count", "50", "--curve-out", str(curve), "--plot"])
    assert rc == 0
    assert (tmp_path / "curve.png").stat().st_size > 0

    feats = tmp_path / "f.csv"
    rc = main(["features", "--model", corpus["model"],
               "--images", corpus["test_images"],
               "--labels", corpus["test_labels"],
               "--out", str(feats), "--plot"])
    assert rc == 0
    assert (tmp_path / "f.png").stat().st_size > 0


def test_console_script_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "protolearn.cli", "gradcheck",
         "--loss", "pl", "--trials", "3"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "pass" in proc.stdout


# --- exit codes and error handling -------------------------------------------

def test_usage_errors_exit_1(corpus, tmp_path, capsys):
    # missing required flag
    assert main(["train", "--train-images", corpus["train_images"],
                 "--train-labels", corpus["train_labels"]]) == 1
    # bad enum value
    assert main(["train", "--loss", "hinge",
                 "--train-images", corpus["train_images"],
                 "--train-labels", corpus["train_labels"],
                 "--out", str(tmp_path / "m.bin")]) == 1
    # mutually exclusive outlier sources
    assert main(["reject", "--model", corpus["model"],
                 "--in-images", corpus["test_images"],
                 "--out-images", corpus["test_images"],
                 "--noise-count", "5",
                 "--curve-out", str(tmp_path / "c.csv")]) == 1
    capsys.readouterr()


def test_single_class_training_exits_1(tmp_path, capsys):
    ds = blob_images(num_classes=1, per_class=12, seed=3)
    write_idx(ds, tmp_path / "x.idx", tmp_path / "y.idx")
    rc = main(["train", "--arch", TINY_ARCH, "--loss", "mcl", "--epochs", "1",
               "--train-images", str(tmp_path / "x.idx"),
               "--train-labels", str(tmp_path / "y.idx"),
               "--out", str(tmp_path / "m.bin")])
    assert rc == 1
    assert "rival class required" in capsys.readouterr().err
    assert not (tmp_path / "m.bin").exists()


def test_data_errors_exit_2(corpus, tmp_path, capsys):
    # missing checkpoint file
    assert main(["eval", "--model", str(tmp_path / "nope.bin"),
                 "--images", corpus["test_images"],
                 "--labels", corpus["test_labels"]]) == 2
    # corrupt checkpoint
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + bytes(64))
    assert main(["eval", "--model", str(bad),
                 "--images", corpus["test_images"],
                 "--labels", corpus["test_labels"]]) == 2
    # a label file where an image file belongs
    assert main(["eval", "--model", corpus["model"],
                 "--images", corpus["test_labels"],
                 "--labels", corpus["test_labels"]]) == 2
    capsys.readouterr()


def test_failed_gradcheck_exits_3(monkeypatch, capsys):
    orig = losses.classification_loss_grad

    def flipped(kind, f, y, bank, hyper):
        g = orig(kind, f, y, bank, hyper)
        return LossGrad(g.loss, -g.d_feature, g.d_protos)

    monkeypatch.setattr(losses, "classification_loss_grad", flipped)
    rc = main(["gradcheck", "--loss", "mce", "--trials", "3"])
    assert rc == 3
    captured = capsys.readouterr()
    assert "FAIL" in captured.out
    assert "error:" in captured.err


def test_usage_error_leaves_no_output_file(corpus, tmp_path, capsys):
    out = tmp_path / "never.bin"
    rc = main(["train", "--arch", TINY_ARCH, "--epochs", "0",
               "--train-images", corpus["train_images"],
               "--train-labels", corpus["train_labels"],
               "--out", str(out)])
    assert rc == 1
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []
    capsys.readouterr()


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "default: 0.001" in text     # learning rate and pl weight
    assert "default: 50" in text        # batch size
    assert "default: 20" in text        # epochs


# --- config file overlay ------------------------------------------------------

def test_config_file_fills_unset_flags(corpus, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\n\nlr = 0.05\nepochs = 2\n")
    a = tmp_path / "a.bin"
    rc = main(["train", "--arch", TINY_ARCH, "--config", str(cfg),
               "--train-images", corpus["train_images"],
               "--train-labels", corpus["train_labels"],
               "--out", str(a)])
    assert rc == 0
    b = tmp_path / "b.bin"
    rc = main(["train", "--arch", TINY_ARCH, "--lr", "0.05", "--epochs", "2",
               "--train-images", corpus["train_images"],
               "--train-labels", corpus["train_labels"],
               "--out", str(b)])
    assert rc == 0
    assert a.read_bytes() == b.read_bytes()


def test_explicit_flag_beats_config(corpus, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=5\nmetrics=" + str(tmp_path / "m.csv") + "\n")
    rc = main(["train", "--arch", TINY_ARCH, "--epochs", "1", "--lr", "0.05",
               "--config", str(cfg),
               "--train-images", corpus["train_images"],
               "--train-labels", corpus["train_labels"],
               "--out", str(tmp_path / "m.bin")])
    assert rc == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 2              # header plus one epoch row


@pytest.mark.parametrize("content,fragment", [
    ("bogus=1\n", "unknown key"),
    ("epochs=abc\n", "bad value"),
    ("epochs\n", "expected key=value"),
])
def test_config_file_errors_point_at_line(corpus, tmp_path, capsys,
                                          content, fragment):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(content)
    rc = main(["train", "--arch", TINY_ARCH, "--config", str(cfg),
               "--train-images", corpus["train_images"],
               "--train-labels", corpus["train_labels"],
               "--out", str(tmp_path / "m.bin")])
    assert rc == 1
    err = capsys.readouterr().err
    assert fragment in err
    assert f"{cfg}:1" in err


def test_missing_config_file_exits_1(corpus, tmp_path, capsys):
    rc = main(["train", "--arch", TINY_ARCH,
               "--config", str(tmp_path / "absent.cfg"),
               "--train-images", corpus["train_images"],
               "--train-labels", corpus["train_labels"],
               "--out", str(tmp_path / "m.bin")])
    assert rc == 1
    capsys.readouterr()


# --- feature dumping edge case -------------------------------------------------

def test_dump_features_empty_dataset_writes_header_only(corpus, tmp_path):
    model = load_model(corpus["model"])
    empty = as_dataset(np.zeros((0, 1, 6, 6)), np.zeros(0, dtype=np.int64), 3)
    path = tmp_path / "empty.csv"
    dump_features(model, empty, path)
    assert path.read_text() == "label,f1,f2\n"
