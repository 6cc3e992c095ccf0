import sys

import numpy as np
import pytest

from tttlab import autodiff as ad


@pytest.fixture(autouse=True)
def _float64():
    """Every test runs at 64-bit, whatever an earlier test did to the default."""
    with ad.precision(np.float64):
        yield


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance lines collected by ``test_acceptance.py``, one per criterion."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
