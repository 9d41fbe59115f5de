import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("concentra", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "concentra"))


@pytest.fixture
def report(capsys):
    """Print one verdict line straight to the terminal."""

    def _report(label, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{label}] {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return _report


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
