import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uavrelay.scenario import AlgoConfig, ChannelParams, Scenario, random_scenario

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def ref_scenario():
    """Ten pairs, three UAVs, reference radio constants."""
    return random_scenario(10, 3, seed=0)


@pytest.fixture
def small_scenario():
    return random_scenario(3, 2, seed=7, side=200.0)


def single_pair(src=(0.0, 0.0), dst=(200.0, 0.0), M=1, **kw) -> Scenario:
    kw.setdefault("region", (0.0, 200.0, -100.0, 100.0))
    check = kw.pop("validate", True)
    sc = Scenario(src=[src], dst=[dst], num_uavs=M, **kw)
    if check:
        sc.validate()
    return sc


def flat_channel() -> ChannelParams:
    """f(v) == 1, i.e. no angle dependence. Outside the validated parameter
    range (C2 must be > 0), so scenarios using it skip ``validate``."""
    return ChannelParams(C1=1.0, C2=0.0)


FAST = AlgoConfig(max_gs_iters=5, max_outer_iters=3, max_bcd_iters=5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
