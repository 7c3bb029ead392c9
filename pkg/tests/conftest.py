import json
import warnings
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from cwsbie.geometry import circular_torus, surface_grid
from cwsbie.layer_potentials import PolarRule, assemble
from cwsbie.reconstruction import prepare

HERE = Path(__file__).parent
ORACLE_VALUES = json.loads((HERE / "oracle_values.json").read_text())

# Filled by test_acceptance.py, printed after the run.
ACCEPTANCE_LINES: list[str] = []


@lru_cache(maxsize=None)
def opset_for(n: int):
    return assemble(surface_grid(circular_torus(), n, n), PolarRule())


@lru_cache(maxsize=None)
def workspace_for(n: int):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return prepare(circular_torus(), n, n, opset=opset_for(n))


@pytest.fixture(scope="session")
def torus():
    return circular_torus()


@pytest.fixture(scope="session")
def opset16():
    return opset_for(16)


@pytest.fixture(scope="session")
def opset32():
    return opset_for(32)


@pytest.fixture(scope="session")
def opset64():
    return opset_for(64)


@pytest.fixture(scope="session")
def ws32():
    return workspace_for(32)


@pytest.fixture(scope="session")
def ws64():
    return workspace_for(64)


@pytest.fixture(scope="session")
def oracle_values():
    return ORACLE_VALUES


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
