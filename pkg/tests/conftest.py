import numpy as np
import pytest

from dlsim.abstraction import build_lut
from dlsim.linksim import BlerCurve, BlerPoint

# lines printed by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def logistic_curves(thr0=-7.5, step=1.9, n_blocks=1000, grid=None, slope=3.0):
    """Smooth synthetic BLER curves with the 10% point of CQI c at thr0 + step*(c-1)."""
    grid = np.arange(-10, 22.01, 0.5) if grid is None else np.asarray(grid)
    out = []
    for c in range(1, 16):
        thr = thr0 + step * (c - 1)
        p = 1 / (1 + np.exp(slope * (grid - thr) - np.log(9)))
        e = np.round(p * n_blocks).astype(int)
        out.append(BlerCurve(c, tuple(BlerPoint(float(s), int(k) / n_blocks, n_blocks, int(k))
                                      for s, k in zip(grid, e))))
    return out


@pytest.fixture(scope="session")
def synth_curves():
    return logistic_curves()


@pytest.fixture(scope="session")
def synth_lut(synth_curves):
    return build_lut(synth_curves, 0.1, seed=0, config_digest="synthetic")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
