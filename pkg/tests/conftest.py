import numpy as np
import pytest

from calfusion.estimators import default_t, get_link
from calfusion.models import ModelSpec
from calfusion.simulation import T_SPEC, V_NAMES, generate_dataset


@pytest.fixture(scope="session")
def sim500():
    return generate_dataset(500, 123)


@pytest.fixture(scope="session")
def sim2000():
    return generate_dataset(2000, 321)


@pytest.fixture(scope="session")
def t_sim():
    d = generate_dataset(20, 0)
    return default_t(d, ModelSpec.parse(T_SPEC, V_NAMES))


@pytest.fixture(scope="session")
def identity():
    return get_link("identity")


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
