import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from netrecon.core import (
    FlowMatrix,
    MarginSystem,
    NodeSet,
    apply_margins,
    build_routing_matrix,
    reduce_problem,
)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden.json").read_text())


def problem_from_sums(rows, cols):
    nodes = NodeSet.of_size(len(rows))
    return reduce_problem(MarginSystem.from_sums(nodes, rows, cols))


def random_instance(n, rng, beta=0.0):
    """Exponential flows with log-normal sender/receiver effects; returns (problem, x, z)."""
    nodes = NodeSet.of_size(n)
    d, g, z = rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, n))
    mu = np.exp(d[:, None] + g[None, :] + beta * z)
    x = FlowMatrix.from_dense(nodes, rng.exponential(mu))
    rt = build_routing_matrix(nodes)
    return reduce_problem(apply_margins(rt, x)), x, z


def relerr(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
