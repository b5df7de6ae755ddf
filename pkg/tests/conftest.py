from pathlib import Path

import numpy as np
import pytest

from tft.data import pad_to, read_idx_arrays

DATA = Path(__file__).resolve().parents[1] / "data"
IMAGES = DATA / "mnist5k-images-idx3-ubyte.gz"
LABELS = DATA / "mnist5k-labels-idx1-ubyte.gz"


def load_mnist(seed=0):
    """The bundled 5,000-digit MNIST sample, shuffled with ``seed`` and padded to 44x44."""
    x, y = read_idx_arrays(IMAGES, LABELS)
    perm = np.random.default_rng(seed).permutation(len(x))
    return np.stack([pad_to(i, 44) for i in x[perm]]), y[perm]


@pytest.fixture(scope="session")
def mnist():
    return load_mnist()


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record one acceptance line; all lines are repeated in the terminal summary."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
