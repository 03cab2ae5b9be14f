import numpy as np
import pytest

from spatialcausal.data import RunConfig
from spatialcausal.lattice import build_rook_grid




@pytest.fixture
def grid3():
    return build_rook_grid(3, 3)


@pytest.fixture
def short_config():
    return RunConfig(iterations=1500, burn_in=500, seed=11)


def ess(x):
    """Effective sample size from the initial positive autocorrelation sequence."""
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = len(x)
    f = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    ac /= ac[0]
    s = 1.0
    for k in range(1, n - 1, 2):
        pair = ac[k] + ac[k + 1]
        if pair < 0:
            break
        s += 2 * pair
    return n / s


ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Store one acceptance verdict; the terminal summary prints them in order."""
    ACCEPTANCE[number] = (passed, detail)
    print(f"\nacceptance criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
