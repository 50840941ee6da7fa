import numpy as np
import pytest

from copasmeta.model_core import MetaSample

ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def normal_sample(rng, m, theta=0.3, tau2=0.0, s_lo=0.1, s_hi=0.6):
    s = rng.uniform(s_lo, s_hi, m)
    d = theta + rng.normal(0.0, np.sqrt(tau2 + s**2))
    return MetaSample.from_arrays(d, s)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
