import numpy as np
import pytest

from xil import tensor as T


@pytest.fixture(autouse=True)
def float64_mode():
    """Tests run in 64-bit precision unless they opt into float32 explicitly."""
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from checks import VERDICTS
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
