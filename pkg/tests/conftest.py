import os

import pytest
from hypothesis import HealthCheck, settings

from camal.analytic import MB, Environment

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# desk-scale profile used by engine tests: B = 64 entries per 4 KB block
TEST_ENV = Environment(N=100_000, E=64, M=256 * 1024, min_buffer=8 * 1024)
# cost-model profile with 1 KB entries (B = 4)
MODEL_ENV = Environment(N=1_000_000, E=1024, M=16 * MB, min_buffer=1 * MB)


@pytest.fixture
def test_env():
    return TEST_ENV


@pytest.fixture
def model_env():
    return MODEL_ENV
