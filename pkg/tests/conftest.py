"""
Shared fixtures: seeded generators, tiny models, synthetic datasets and a
finite-difference gradient checker.
"""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from apcsim.datasets import Dataset, write_idx
from apcsim.models import Conv2d, Dense, Flatten, MaxPool, ModelGraph, ReLU, SoftmaxHead
from apcsim.storage import save_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _float32_weights(model, seed):
    model.init_weights(seed)
    model.weights = {
        i: {k: v.astype(np.float32).astype(np.float64) for k, v in w.items()} for i, w in model.weights.items()
    }
    return model


@pytest.fixture
def tiny_mlp():
    """Dense 4-5-3 with float32-representable weights."""
    model = ModelGraph("tiny_mlp", (4,), 3, [Dense(4, 5), ReLU(), Dense(5, 3), SoftmaxHead()])
    return _float32_weights(model, seed=7)


@pytest.fixture
def three_layer_mlp():
    model = ModelGraph("three_layer", (4,), 3, [
        Dense(4, 6), ReLU(), Dense(6, 5), ReLU(), Dense(5, 3), SoftmaxHead(),
    ])
    return _float32_weights(model, seed=11)


@pytest.fixture
def tiny_cnn():
    """Conv 2x1x3x3 (pad 1) on 1x6x6, ReLU, 2x2 max pool, dense 18 -> 3."""
    model = ModelGraph("tiny_cnn", (1, 6, 6), 3, [
        Conv2d(2, 1, 3, 3, stride=1, padding=1), ReLU(), MaxPool(2, 2),
        Flatten(), Dense(18, 3), SoftmaxHead(),
    ])
    return _float32_weights(model, seed=3)


def make_blobs(count, seed=0, features=4, classes=3):
    """Linearly separable clusters: class c is centred on 2 * e_c."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=count)
    centres = 2.0 * np.eye(classes, features)
    data = centres[labels] + 0.3 * rng.standard_normal((count, features))
    return Dataset(data, labels)


@pytest.fixture
def blobs():
    return make_blobs(240, seed=0)


@pytest.fixture
def blobs_test():
    return make_blobs(120, seed=1)


@pytest.fixture
def image_blobs():
    """1x6x6 images whose class sets one bright quadrant row."""
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 3, size=90)
    images = 0.1 * rng.random((90, 1, 6, 6))
    for i, label in enumerate(labels):
        images[i, 0, 2 * label:2 * label + 2, :] += 1.0
    return Dataset(images, labels)


@pytest.fixture
def gradcheck():
    """Return check(f, x, analytic) comparing against central differences in float64."""

    def numerical_gradient(f, x, eps=1e-6):
        x = np.array(x, dtype=np.float64)
        grad = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + eps
            plus = f(x)
            x[idx] = orig - eps
            minus = f(x)
            x[idx] = orig
            grad[idx] = (plus - minus) / (2 * eps)
        return grad

    def check(f, x, analytic, rtol=1e-5, atol=1e-7):
        expected = numerical_gradient(f, x)
        np.testing.assert_allclose(analytic, expected, rtol=rtol, atol=atol)
        return expected

    check.numerical_gradient = numerical_gradient
    return check


@pytest.fixture
def csv_experiment(tmp_path, tiny_mlp):
    """A saved tiny model, CSV train/test splits and an experiment file using them."""
    train, test = make_blobs(200, seed=0), make_blobs(100, seed=1)
    for name, data in (("train", train), ("test", test)):
        table = np.column_stack([data.labels, data.features])
        np.savetxt(tmp_path / f"{name}.csv", table, delimiter=",", fmt="%.6f")
    save_model(tiny_mlp, tmp_path / "model.json")

    config = {
        "model": "model.json",
        "train_data": {"path": "train.csv", "format": "csv", "scale": 1.0},
        "test_data": {"path": "test.csv", "format": "csv", "scale": 1.0},
        "noise": {"kind": "thermal", "sigma_t": 0.01},
        "optim": {"steps": 5, "batch_size": 16, "train_fraction": 1.0},
        "eval": {"energy_per_mac": 1.0},
        "output_dir": "out",
    }
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(config))
    return path


@pytest.fixture
def idx_files(tmp_path):
    """A tiny 28x28 IDX split (gzip-compressed images)."""
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, size=40).astype(np.uint8)
    images = (rng.random((40, 28, 28)) * 255).astype(np.uint8)
    images_path, labels_path = tmp_path / "images-idx3-ubyte.gz", tmp_path / "labels-idx1-ubyte"
    write_idx(images_path, images)
    write_idx(labels_path, labels)
    return images_path, labels_path, images, labels


def mnist_dir():
    path = os.getenv("APCSIM_MNIST_DIR")
    return Path(path) if path else None


@pytest.fixture(scope="session")
def mnist():
    """MNIST train/test splits; skips unless APCSIM_MNIST_DIR is set."""
    from apcsim.datasets import load_dataset

    directory = mnist_dir()
    if directory is None:
        pytest.skip("APCSIM_MNIST_DIR not set")

    def find(stem):
        for candidate in (directory / stem, directory / f"{stem}.gz"):
            if candidate.exists():
                return candidate
        pytest.skip(f"{stem} not found in {directory}")

    train = load_dataset(find("train-images-idx3-ubyte"), "idx", find("train-labels-idx1-ubyte"), split="train")
    test = load_dataset(find("t10k-images-idx3-ubyte"), "idx", find("t10k-labels-idx1-ubyte"), split="test")
    return train, test
