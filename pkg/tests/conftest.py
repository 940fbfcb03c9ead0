import os

# Single-threaded BLAS keeps timings and bitwise determinism stable.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def spec_s():
    from nextvit.model import build_variant

    return build_variant("S")


@pytest.fixture(scope="session")
def params_s(spec_s):
    from nextvit.model import init_params

    return init_params(spec_s, seed=0)


@pytest.fixture(scope="session")
def tiny():
    from nextvit.checks import tiny_model

    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
