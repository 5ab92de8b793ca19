import os

import numpy as np
import pytest

from attnheat.data import write_cifar10, synthetic_cifar10
from attnheat.tensor import active_tape

# acceptance outcomes, filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


@pytest.fixture(autouse=True)
def _fresh_tape():
    active_tape().clear()
    yield
    active_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cifar_dir(tmp_path):
    """Synthetic data laid out like the CIFAR-10 binary distribution."""
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    for i in range(1, 6):
        write_cifar10(synthetic_cifar10(40, seed=10 + i), d / f"data_batch_{i}.bin")
    write_cifar10(synthetic_cifar10(50, seed=99), d / "test_batch.bin")
    return d


def real_cifar_root():
    from attnheat.data import find_cifar10
    root = os.environ.get("CIFAR10_DIR")
    return root if root and find_cifar10(root) else None


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        tr.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
