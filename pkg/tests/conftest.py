import os
from pathlib import Path

import numpy as np
import pytest

from acpc_ota.config import DATA_DIR_ENV

ROOT = Path(__file__).resolve().parents[1]
os.environ.setdefault(DATA_DIR_ENV, str(ROOT / "data" / "mnist"))


def _have_mnist() -> bool:
    root = Path(os.environ[DATA_DIR_ENV])
    return any((root / f"train-images-idx3-ubyte{s}").exists() for s in ("", ".gz"))


requires_mnist = pytest.mark.skipif(not _have_mnist(), reason=f"MNIST not found; set {DATA_DIR_ENV}")


@pytest.fixture
def mnist_dir() -> Path:
    if not _have_mnist():
        pytest.skip(f"MNIST not found; set {DATA_DIR_ENV}")
    return Path(os.environ[DATA_DIR_ENV])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_logistic(n_per_client=(7, 5, 9), n_features=4, classes=3, seed=0, lam=0.0):
    from acpc_ota.objectives import LogisticProblem

    r = np.random.default_rng(seed)
    feats = [r.random((n, n_features)) for n in n_per_client]
    labels = [r.integers(0, classes, n) for n in n_per_client]
    return LogisticProblem.from_clients(feats, labels, classes, lam=lam)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
