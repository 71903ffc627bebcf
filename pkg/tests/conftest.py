import sys
from pathlib import Path

import numpy as np
import pytest

# make tests/oracles.py importable as a plain module from any test file
sys.path.insert(0, str(Path(__file__).parent))

from oracles import circle_data  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def ring_data():
    """Donut path data: outer circle plus inner hole (even-odd)."""
    return circle_data(16.0, 16.0, 12.0) + " " + circle_data(16.0, 16.0, 6.0)
