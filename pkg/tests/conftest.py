import numpy as np
import pytest

from unite import synth


@pytest.fixture(scope="session")
def small_data():
    """A small synthetic data set shared by unit tests."""
    return synth.generate(synth.SynthSpec(n_segments=60, n_trajectories=150, route_length=(3, 12), seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
