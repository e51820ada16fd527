import numpy as np
import pytest

from earlybird.data import DataSplits, Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` with respect to every element of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def blob_splits(n_train=256, n_val=64, n_test=128, shape=(1, 8, 8), num_classes=4, seed=0):
    """Class-dependent mean images plus noise; learnable in a couple of epochs."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(0, 1, (num_classes,) + shape).astype(np.float32)

    def make(n):
        y = rng.integers(0, num_classes, n)
        x = centres[y] + 0.5 * rng.normal(0, 1, (n,) + shape).astype(np.float32)
        return Dataset(x.astype(np.float32), y, num_classes)

    return DataSplits(make(n_train), make(n_val), make(n_test))


@pytest.fixture
def blobs():
    return blob_splits()


# --------------------------------------------------------------------------
# Acceptance criteria: one PASS/FAIL line each, repeated in the terminal summary
# --------------------------------------------------------------------------

ACCEPTANCE = []


def record_criterion(name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
