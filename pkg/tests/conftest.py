import json
from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


def random_stable_system(rng, n):
    """Random continuous system whose A has eigenvalues with negative real part."""
    m = rng.normal(size=(n, n))
    a = m - (np.max(np.real(np.linalg.eigvals(m))) + rng.uniform(0.2, 1.5)) * np.eye(n)
    b = rng.normal(size=(n, 1))
    c = rng.normal(size=(1, n))
    return a, b, c


@pytest.fixture
def ssm_vectors():
    return json.loads((FIXTURES / "ssm_vectors.json").read_text())["cases"]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
