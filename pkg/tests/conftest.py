import time
from dataclasses import replace

import numpy as np
import pytest

from offset_inekf.harness import TrialConfig, run_experiment
from offset_inekf.simulator import FrameOffsets

_CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def study():
    """The full 50-trial comparison with default settings, timed."""
    t0 = time.perf_counter()
    summary = run_experiment(50)
    return summary, time.perf_counter() - t0


@pytest.fixture(scope="session")
def zero_offset_study():
    cfg = replace(TrialConfig(), offsets=FrameOffsets())
    return run_experiment(50, cfg)


@pytest.fixture(scope="session")
def report_criterion():
    """Record one acceptance result; all are printed at the end of the run."""

    def report(number, title, passed, detail):
        _CRITERIA[number] = (title, bool(passed), detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})")

    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} {status}: {title} ({detail})")
