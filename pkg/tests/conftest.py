import math

import pytest

from mwqubit import DecayRates, EnsembleSpec, khz_to_rad

CHI0_KHZ = 27.78


@pytest.fixture
def chi0():
    return khz_to_rad(CHI0_KHZ)


@pytest.fixture
def lattice_spec(chi0):
    """Spreads fitted to lattice data: 0.3% in Rabi rate, 7.3% in detuning."""
    return EnsembleSpec(chi0, 0.0, 0.003 * chi0, 0.073 * chi0)


@pytest.fixture
def lattice_decay():
    return DecayRates.from_tau_d(5.5e-3)


def loglog_slope(x, y):
    import numpy as np

    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


PI = math.pi


#: PASS/FAIL lines collected by the acceptance suite
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
