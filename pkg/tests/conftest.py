import sys
from pathlib import Path

import numpy as np
import pytest

import ptsne

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def gauss400():
    """Four well-separated leaves of 100 points each, 8-D."""
    return ptsne.make_hierarchical_gaussians(2, 2, 100)


@pytest.fixture(scope="session")
def gauss400_index(gauss400):
    return ptsne.build_neighbor_index(gauss400, 10.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260814)
