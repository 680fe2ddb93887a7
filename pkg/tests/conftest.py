import os
from pathlib import Path

import pytest

from fedvtc.data import DATA_ROOT_ENV, prepare_mnist_subset

SUBSET_ENV = "FEDVTC_MNIST_SUBSET"


def mnist_subset_dir() -> Path:
    """Directory holding the 4000/1000 MNIST subset; built on first use."""
    root = Path(os.environ.get(SUBSET_ENV, Path.home() / ".cache" / "fedvtc" / "mnist5k"))
    if not (root / "t10k-labels-idx1-ubyte.gz").exists():
        pytest.importorskip("mlxtend")
        prepare_mnist_subset(root)
    return root


@pytest.fixture(scope="session")
def mnist_subset_root():
    return mnist_subset_dir()


@pytest.fixture(autouse=True)
def _no_data_root_override(monkeypatch):
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
