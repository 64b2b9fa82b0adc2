import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from shapely.geometry import box

settings.register_profile(
    "default", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def unit_square():
    return box(0.0, 0.0, 1.0, 1.0)


@pytest.fixture(scope="session")
def small_mesh(unit_square):
    from icebhm.mesh import build_mesh

    return build_mesh(unit_square, 0.1, 0.3, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
