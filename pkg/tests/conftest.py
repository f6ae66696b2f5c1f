import os
from pathlib import Path

import numpy as np
import pytest

from ringfed.data import load_idx, make_synthetic

DATA_DIR = Path(os.environ.get("RINGFED_DATA", Path(__file__).resolve().parents[1] / "data"))
MNIST = DATA_DIR / "mnist"
MNIST_FILES = {
    "train_images": MNIST / "train-images-idx3-ubyte.gz",
    "train_labels": MNIST / "train-labels-idx1-ubyte.gz",
    "test_images": MNIST / "t10k-images-idx3-ubyte.gz",
    "test_labels": MNIST / "t10k-labels-idx1-ubyte.gz",
}


@pytest.fixture(scope="session")
def mnist_paths():
    missing = [str(p) for p in MNIST_FILES.values() if not p.exists()]
    if missing:
        pytest.skip(f"MNIST not found (set RINGFED_DATA): {missing}")
    return {k: str(v) for k, v in MNIST_FILES.items()}


@pytest.fixture(scope="session")
def mnist_train(mnist_paths):
    return load_idx(mnist_paths["train_images"], mnist_paths["train_labels"])


@pytest.fixture(scope="session")
def mnist_test(mnist_paths):
    return load_idx(mnist_paths["test_images"], mnist_paths["test_labels"], num_classes=10)


@pytest.fixture
def toy2():
    """200-example, 2-feature, 2-class blob dataset."""
    return make_synthetic(200, input_dim=2, num_classes=2, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, repeated in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion(capsys):
    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES[number] = line
        with capsys.disabled():
            print(f"\n{line}")
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
