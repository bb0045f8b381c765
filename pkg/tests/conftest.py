import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_scenario():
    """A short loop that keeps module-level tests fast."""
    from irloc.experiments import Scenario
    from irloc.simgen import WorldParams

    return Scenario(
        world=WorldParams(loop_radius=20.0),
        training_taus=(0.0, 0.25, 0.5),
        training_sweep=math.pi,
        k=8,
        levels=3,
        n_queries=30,
    )


@pytest.fixture(scope="session")
def small_vocab(small_scenario):
    from irloc.experiments import train_vocabulary

    return train_vocabulary(small_scenario)


@pytest.fixture(scope="session")
def small_world(small_scenario):
    return small_scenario.test_world()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
