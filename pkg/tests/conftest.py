import numpy as np
import pytest
from hypothesis import settings
from scipy.stats import chisquare

from smpc_fedsim.ring_fixed import FixedPointConfig, Ring

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cfg():
    return FixedPointConfig()


@pytest.fixture
def ring64():
    return Ring(64)


def chi2_uniform_pvalue(samples, bins: int) -> float:
    """Pearson chi-square p-value for ``samples`` being uniform over range(bins)."""
    counts = np.bincount(np.asarray(samples, dtype=np.int64).ravel(), minlength=bins)
    return float(chisquare(counts).pvalue)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
