import numpy as np
import pytest

from energy_aligning.data import LabeledDataset, synth_gaussians
from energy_aligning.model import init_params
from energy_aligning.training import SgdConfig


@pytest.fixture()
def rng():
    """Seeded generator for randomized property checks."""
    return np.random.default_rng(12345)


@pytest.fixture()
def two_blobs():
    """Two linearly separable classes centred at (+3, 0) and (-3, 0)."""
    noise = np.random.default_rng(3).normal(scale=0.3, size=(80, 2))
    centres = np.repeat(np.array([[3.0, 0.0], [-3.0, 0.0]]), 40, axis=0)
    return LabeledDataset(centres + noise, np.repeat([0, 1], 40), 2)


@pytest.fixture()
def small_dataset():
    return synth_gaussians(4, 3, spread=2.0, sigma=0.5, n_per_class=10, seed=7)


@pytest.fixture()
def tiny_mlp():
    """3 -> 4 -> 3 rectifier network with a linear head (31 parameters)."""
    return init_params([3, 4, 3], head="linear", seed=11)


@pytest.fixture()
def tiny_cosine():
    """3 -> 4 -> 3 rectifier network with a cosine head (28 parameters)."""
    return init_params([3, 4, 3], head="cosine", seed=11, scale=4.0)


@pytest.fixture()
def fast_sgd():
    return SgdConfig(learning_rate=0.1, schedule="constant", epochs=5, batch_size=16, seed=0)


@pytest.fixture()
def hand_dataset():
    features = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [3.0, 1.0]])
    return LabeledDataset(features, np.array([0, 1, 1, 0]), 2)
