import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from core_math import Rng  # noqa: E402
from data_io import MNIST_FILES, write_idx  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _no_log_file(monkeypatch):
    monkeypatch.setenv("AUTOOPT_LOG_FILE", "")


@pytest.fixture
def rng():
    return Rng(1234)


def synthetic_digits(rng: Rng, count: int, side: int = 8):
    """uint8 images where class k lights up row k % side; learnable by a tiny MLP."""
    gen = rng.generator
    labels = gen.integers(0, 10, size=count)
    images = gen.integers(0, 40, size=(count, side, side))
    for i, label in enumerate(labels):
        images[i, label % side, :] += 200
        if label >= side:
            images[i, :, 0] += 200
    return np.clip(images, 0, 255).astype(np.uint8), labels.astype(np.uint8)


@pytest.fixture
def idx_dir(tmp_path):
    """MNIST-named IDX files holding 8x8 synthetic digits (256 train, 64 test)."""
    for split, count, seed in (("train", 256, 1), ("test", 64, 2)):
        images, labels = synthetic_digits(Rng(seed), count)
        image_file, label_file = MNIST_FILES[split]
        write_idx(images, labels, tmp_path / image_file, tmp_path / label_file)
    return tmp_path


@pytest.fixture
def mnist_dir():
    path = os.getenv("AUTOOPT_DATA_DIR", "data")
    if not os.path.exists(os.path.join(path, MNIST_FILES["train"][0])) and \
            not os.path.exists(os.path.join(path, MNIST_FILES["train"][0] + ".gz")):
        pytest.skip(f"MNIST files not found in {path}")
    return path
