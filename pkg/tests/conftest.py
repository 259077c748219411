import os

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from mvtp.data import Dataset

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture(autouse=True, scope="session")
def _single_blas_thread():
    with threadpool_limits(1):
        yield


def random_dataset(n, p=2, k=2, seed=0, effect=1.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    a = 1.0 + 0.5 * rng.standard_normal((n, k)) + (0.3 * x[:, :1] if p else 0.0)
    y = x.sum(axis=1) + effect * a.sum(axis=1) + rng.standard_normal(n)
    return Dataset(x=x, a=a, y=y)


@pytest.fixture
def golden_paths():
    return (os.path.join(DATA_DIR, "golden_200.csv"),
            os.path.join(DATA_DIR, "golden_200.schema.json"))


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
