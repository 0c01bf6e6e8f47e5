import math

import numpy as np
import pytest

from mildbbm.offspring import OffspringDistribution


@pytest.fixture
def binary():
    return OffspringDistribution.binary()


@pytest.fixture
def geometric_type():
    # mean 1, sigma^2 = 1, support up to 3
    return OffspringDistribution.from_mapping({0: 0.4, 1: 0.3, 2: 0.2, 3: 0.1})


def closed_form_exit(x):
    """6 / (x + sqrt 6)^2 solves p'' = p^2 with p(0) = 1, p(inf) = 0."""
    return 6.0 / (np.asarray(x) + math.sqrt(6.0)) ** 2


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
