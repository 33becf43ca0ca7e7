import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from t2diff.numerics.tensor import precision

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def f64():
    with precision(np.float64):
        yield
