import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fuzzycurriculum.volume import LabelVolume  # noqa: E402


@pytest.fixture
def flat_boundary():
    """4x4x4 volume: class 0 for z < 2, class 1 for z >= 2."""
    data = np.zeros((4, 4, 4), dtype=np.uint8)
    data[2:] = 1
    return LabelVolume(data, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
