import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lmebm.model import MachineSpec, WeightMatrix  # noqa: E402


def random_weights(m, rng, scale=1.5):
    return WeightMatrix.random(m, scale, rng)


def nested(weights: WeightMatrix):
    return weights.matrix.tolist()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def spec53():
    return MachineSpec(5, 3)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
