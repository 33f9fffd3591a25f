import pathlib
import sys
import time

import pytest
import torch

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from hetpure.classifier import train_classifier  # noqa: E402
from hetpure.data import DatasetSpec, generate  # noqa: E402


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_data():
    return generate(DatasetSpec())


@pytest.fixture(scope="session")
def toy_classifier(toy_data):
    (xtr, ytr), (xte, yte) = toy_data["train"], toy_data["test"]
    return train_classifier(xtr, ytr, epochs=20, lr=0.2, batch=32, seed=0, val_images=xte, val_labels=yte)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


class _Criterion:
    def __init__(self, number: int, title: str, budget: float):
        self.number, self.title, self.budget = number, title, budget
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None and elapsed <= self.budget
        why = ""
        if exc_type is not None:
            why = f" [{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}]"
        elif elapsed > self.budget:
            why = f" [over budget {self.budget:.0f}s]"
        ACCEPTANCE_LINES[self.number] = (
            f"criterion {self.number:2d} {'PASS' if ok else 'FAIL'}  {self.title}: {self.detail} ({elapsed:.1f}s){why}"
        )
        if exc_type is None and elapsed > self.budget:
            raise AssertionError(f"criterion {self.number} took {elapsed:.1f}s, budget {self.budget:.0f}s")
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title, budget_seconds) as c: ...``; set ``c.detail`` for the summary line."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
