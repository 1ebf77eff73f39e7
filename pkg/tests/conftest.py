import sys
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ttca", deadline=None, derandomize=True, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ttca")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        passed, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
