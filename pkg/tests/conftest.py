import os

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
# tests may run from any cwd; point the default lookup at the bundled subset
os.environ.setdefault("BRIDGENET_DATA", os.path.join(ROOT, "data", "mnist-subset"))

from bridgenet.data import default_data_dir, find_mnist  # noqa: E402

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, title, passed, detail):
    ACCEPTANCE[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def mnist_available():
    try:
        find_mnist(default_data_dir(), "train")
        find_mnist(default_data_dir(), "test")
    except FileNotFoundError:
        return False
    return True


requires_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST IDX files not found; set BRIDGENET_DATA")
