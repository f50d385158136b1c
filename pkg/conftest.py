# conftest.py
import numpy as np
import pytest

from trial_data import Dataset, TimeGrid
from trial_simulator import IGNORABLE_TRIAL, REFERENCE_TRIAL, simulate


@pytest.fixture(scope="session")
def trial():
    """One default-size simulated trial."""
    return simulate(REFERENCE_TRIAL, seed=7)


@pytest.fixture(scope="session")
def pi_trial():
    """Trial where monotonicity and principal ignorability hold exactly."""
    return simulate(IGNORABLE_TRIAL.with_size(2000), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(20240)


@pytest.fixture
def toy_dataset():
    """Eight records, two per (Z, D) cell, one covariate."""
    return Dataset(
        arm=np.array([0, 0, 0, 0, 1, 1, 1, 1]),
        ice=np.array([0, 0, 1, 1, 0, 0, 1, 1]),
        time=np.array([5.0, 7.0, 2.0, 9.0, 4.0, 6.0, 3.0, 8.0]),
        event=np.array([1, 0, 1, 1, 0, 1, 1, 0]),
        X=np.array([[0.5], [-1.0], [0.0], [2.0], [1.5], [-0.5], [0.3], [-2.0]]),
        covariate_names=("x",),
    )


@pytest.fixture
def grid():
    return TimeGrid.equispaced(30.0, 31)
