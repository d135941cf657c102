import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def away_from_zero(rng, shape, margin=0.05):
    """Random values bounded away from 0 so ReLU kinks stay out of finite-difference range."""
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x))
