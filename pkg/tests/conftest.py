import numpy as np
import pytest

from dvae_umot import srnn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def random_params():
    return srnn.SrnnParams.init(seed=7)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance PASS/FAIL lines collected by test_acceptance.py."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
