import numpy as np
import pytest
from hypothesis import settings

# Deterministic, CI-friendly hypothesis runs.
settings.register_profile("ci", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
