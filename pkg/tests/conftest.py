import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nnvi.problems import DualProblemSpec
from nnvi.utility import UtilityFamily

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

MARKET = dict(mu=0.1, r=0.05, sigma=0.3, beta=0.1, K=1.0, T=1.0)
WEALTH = np.round(np.arange(1.1, 2.01, 0.1), 10)


@pytest.fixture
def power_spec():
    return DualProblemSpec(UtilityFamily.power(0.5), z_lo=-0.5, z_hi=1.5, **MARKET)


@pytest.fixture
def nonhara_spec():
    return DualProblemSpec(UtilityFamily.non_hara(), z_lo=-0.5, z_hi=1.5, **MARKET)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch, request):
    # acceptance tests share the persistent cache; everything else is sandboxed
    if "acceptance" not in request.node.nodeid:
        monkeypatch.setenv("NNVI_CACHE_DIR", str(tmp_path / "cache"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow-tier tests (hours of CPU training)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("NNVI_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow tier; use --runslow or NNVI_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
