import sys
from pathlib import Path

import numpy as np
import pytest

# Add the src directory to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from stlmine.kernel import FDistParams, build_reference_set  # noqa: E402
from stlmine.templates import ParameterGrid  # noqa: E402
from stlmine.trajectories import LabeledDataset, gen_linear_dataset  # noqa: E402
from stlmine.vector_db import build_db  # noqa: E402


@pytest.fixture(scope="session")
def small_reference():
    """60 anchors over 2 variables, 300 mu0 trajectories."""
    return build_reference_set(n_train=60, n_mc=300, fparams=FDistParams(n_vars=2, max_nodes=5), seed=0, threads=1)


@pytest.fixture(scope="session")
def small_grid():
    return ParameterGrid((-2.0, -1.0, 0.0, 1.0, 2.0), (0.0, 30.0, 70.0, 100.0))


@pytest.fixture(scope="session")
def small_db(small_reference, small_grid):
    """One-variable formulae with up to 3 nodes."""
    return build_db(3, 1, small_grid, 0.98, small_reference, cap=300, seed=0, signature_size=50, threads=1)


@pytest.fixture(scope="session")
def linear_dataset():
    return gen_linear_dataset(n_pos=30, n_neg=30, n_points=100, seed=3)


@pytest.fixture
def constant_dataset():
    """Positives hold constants {1, 3}, negatives {-1, -3}, 10 samples each."""
    pos = np.array([np.full((1, 10), 1.0), np.full((1, 10), 3.0)])
    neg = np.array([np.full((1, 10), -1.0), np.full((1, 10), -3.0)])
    return LabeledDataset(pos, neg, 1.0)
