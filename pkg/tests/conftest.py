"""Shared fixtures: synthetic datasets, a small pre-trained model, and
the optional MNIST directory used by the heavyweight acceptance tests.

MNIST is looked up in $PROTOLEARN_MNIST_DIR, then ./data/mnist. Tests
that need it skip with a pointer when the files are missing, so the
suite stays green on machines without the dataset.
"""

import gzip
import os
import shutil

import numpy as np
import pytest

from protolearn.data import Dataset, dataset_from_idx, make_gaussian_blobs
from protolearn.losses import LossHyper
from protolearn.train import TrainConfig, train

TINY_ARCH = "in:1x6x6;conv:4,3,1,1;relu;pool:2;fc:16;relu;fc:2"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def blob_images(num_classes=3, per_class=60, side=6, sigma=0.05, seed=0):
    """Well-separated Gaussian-blob image dataset.

    Center c depends only on (side, c), so datasets built with different
    seeds or class counts sample the same classes under fresh noise."""
    dim = side * side
    centers = np.stack([
        np.random.default_rng([7, side, c]).uniform(0.2, 0.8, size=dim)
        for c in range(num_classes)])
    return make_gaussian_blobs(num_classes, per_class, (1, side, side),
                               centers, sigma, seed)


@pytest.fixture(scope="session")
def blobs_train():
    return blob_images(seed=0)


@pytest.fixture(scope="session")
def blobs_test():
    return blob_images(seed=1)


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig(arch=TINY_ARCH, loss="dce",
                       hyper=LossHyper(gamma=2.0, pl_weight=0.001),
                       learning_rate=0.05, batch_size=20, epochs=12, seed=0)


@pytest.fixture(scope="session")
def tiny_model(tiny_config, blobs_train):
    """A small but genuinely trained model shared by read-only tests."""
    return train(tiny_config, blobs_train)


def _find_mnist():
    root = os.environ.get("PROTOLEARN_MNIST_DIR", os.path.join("data", "mnist"))
    if not os.path.isdir(root):
        return None, f"directory {root!r} not found"
    paths = {}
    for key, name in MNIST_FILES.items():
        plain = os.path.join(root, name)
        gz = plain + ".gz"
        if os.path.exists(plain):
            paths[key] = plain
        elif os.path.exists(gz):
            paths[key] = gz
        else:
            return None, f"missing {name}[.gz] in {root!r}"
    return paths, None


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Resolved MNIST file paths, decompressing .gz copies if needed."""
    paths, why = _find_mnist()
    if paths is None:
        pytest.skip(
            f"MNIST unavailable ({why}); set PROTOLEARN_MNIST_DIR or place "
            "the four IDX files under ./data/mnist to run this test")
    out = {}
    cache = tmp_path_factory.mktemp("mnist")
    for key, path in paths.items():
        if path.endswith(".gz"):
            plain = cache / os.path.basename(path)[:-3]
            if not plain.exists():
                with gzip.open(path, "rb") as src, open(plain, "wb") as dst:
                    shutil.copyfileobj(src, dst)
            out[key] = str(plain)
        else:
            out[key] = path
    return out


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    return dataset_from_idx(mnist_dir["train_images"], mnist_dir["train_labels"])


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    return dataset_from_idx(mnist_dir["test_images"], mnist_dir["test_labels"])


def as_dataset(pixels, labels, num_classes):
    return Dataset(np.asarray(pixels, dtype=np.float64),
                   None if labels is None else np.asarray(labels), num_classes)
