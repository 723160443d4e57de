import os

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import numpy as np
import pytest

from eemda.eemio import EMISSION_NM, EXCITATION_NM, EEMGrid


def make_grid(values=None, seed=None):
    shape = (len(EXCITATION_NM), len(EMISSION_NM))
    if values is None:
        rng = np.random.default_rng(seed)
        values = rng.uniform(0, 1000, size=shape)
    elif np.isscalar(values):
        values = np.full(shape, float(values))
    return EEMGrid(np.array(EXCITATION_NM), np.array(EMISSION_NM), values)


@pytest.fixture
def grid():
    return make_grid(seed=0)


@pytest.fixture(scope="session")
def tiny_dataset():
    from eemda.synth import generate_dataset, tiny_spec

    return generate_dataset(tiny_spec())


# --- acceptance reporting ------------------------------------------------------

ACCEPTANCE: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> bool:
    line = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
