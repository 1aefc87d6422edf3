import numpy as np
import pytest

from specclip.model import Batch, MlpConfig, init_params
from specclip.linalg import RngStream


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_net():
    cfg = MlpConfig((5, 7, 3), "tanh")
    params = init_params(cfg, RngStream(7, "init"))
    rng = np.random.default_rng(3)
    batch = Batch(rng.normal(size=(6, 5)), rng.integers(0, 3, size=6))
    return cfg, params, batch


ACCEPTANCE_LINES = {}


def record_acceptance(number, name, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
