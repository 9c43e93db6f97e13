import json
from pathlib import Path

import numpy as np
import pytest

from sctd.dictionary import dictionary_from_config
from sctd.synthetic import make_phantom

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "sctd" / "configs"

# Lines recorded by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def load_config(name):
    return json.loads((CONFIGS / f"{name}.json").read_text())


@pytest.fixture(scope="session")
def phantom():
    return make_phantom()


@pytest.fixture(scope="session")
def library_a(phantom):
    return dictionary_from_config(load_config("library_case_a"), phantom.dictionary.time_axis)


@pytest.fixture(scope="session")
def library_b(phantom):
    return dictionary_from_config(load_config("library_case_b"), phantom.dictionary.time_axis)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
