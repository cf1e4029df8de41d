import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from diffcollage.schedule import NoiseSchedule

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


@pytest.fixture
def schedule():
    return NoiseSchedule("linear-ve", 0.002, 80.0)
