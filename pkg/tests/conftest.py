import numpy as np
import pytest
import torch

from backtime.data import SyntheticRecipe, WindowSpec, fit_standardize, generate_synthetic, split

torch.set_num_threads(1)


@pytest.fixture
def spec():
    return WindowSpec(12, 12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_standardized():
    """N=4, T=600 synthetic series z-scored on its train split."""
    ds = generate_synthetic(4, 600, seed=3, recipe=SyntheticRecipe())
    train = split(ds, window=WindowSpec())[0]
    return fit_standardize(ds, train)[0]
