import logging

import numpy as np
import pytest

from dopl.model import Params

logging.getLogger("dopl").setLevel(logging.ERROR)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def q3_params():
    return Params([0.7, -0.4], [0.3, -0.5, 0.9], [-0.8, 0.6])


def random_params(rng, Q, K):
    gaps = rng.uniform(0.3, 1.5, size=Q - 1)
    lam = np.cumsum(gaps)
    return Params(rng.uniform(-1, 1, K), rng.uniform(-1, 1, Q), lam - lam.mean())


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
