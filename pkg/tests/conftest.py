import os
import time
from pathlib import Path

import numpy as np
import pytest

from nucleo import synthetic
from nucleo.config import ENV_DATASET

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed, detail: str = "") -> None:
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    ACCEPTANCE_LINES.append(f"[{status}] {criterion}" + (f" -- {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def dataset_root():
    root = os.environ.get(ENV_DATASET)
    if not root or not Path(root, "EDF").is_dir():
        pytest.skip(f"published dataset not available (set {ENV_DATASET})")
    return Path(root)


@pytest.fixture(scope="session")
def synthetic_gt():
    return synthetic.synthetic_set(n_train=4, n_test=2, seed=0)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory, synthetic_gt):
    return synthetic.write_dataset(synthetic_gt, tmp_path_factory.mktemp("syn"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


OVERFIT_LR = 0.01


@pytest.fixture(scope="session")
def overfit_run():
    """200-patch balanced subset trained until it is memorized (or 200 epochs).

    Returns ``(model, subset, epochs_used, accuracy, seconds)``.
    """
    from nucleo import cnn
    gt = synthetic.synthetic_set(n_train=12, n_test=0, seed=0)
    ps = cnn.extract_patches(gt.frames, stride=cnn.TRAIN_STRIDE)
    sub = cnn.balanced_subset(ps, 200, seed=0)
    model = cnn.init_model(seed=0)
    epochs, acc = 0, 0.0
    t = time.perf_counter()
    while epochs < 200:
        model, _ = cnn.train(model, sub, epochs=10, lr=OVERFIT_LR, seed=epochs)
        epochs += 10
        acc = cnn.accuracy(model, sub)
        if acc >= 0.99:
            break
    return model, sub, epochs, acc, time.perf_counter() - t
