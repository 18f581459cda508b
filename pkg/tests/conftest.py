import math
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kgmpc.grid.model import Branch, Bus, GridModel, Machine

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def two_machine_model(x_line=0.5, h=(3.0, 5.0), d=(0.0, 0.0), r_line=0.0, loads=(), retained=(2,), dsms_bus=None):
    """Two classical machines tied by one line; lossless unless told otherwise."""
    buses = (Bus(1), Bus(2))
    branches = (Branch("1-2", 1, 2, r_line, x_line),)
    machines = (
        Machine("M1", 1, h[0], d[0], 0.2, 1.0, 0.0),
        Machine("M2", 2, h[1], d[1], 0.3, 1.0, 0.0),
    )
    return GridModel(buses, branches, machines, tuple(loads), retained=retained, dsms_bus=dsms_bus)


@pytest.fixture
def two_machine():
    return two_machine_model()


@pytest.fixture(scope="session")
def benchmark():
    from kgmpc.harness import setup_from_config

    return setup_from_config()


def rad(deg):
    return math.radians(deg)


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record_criterion(key, passed, detail):
    ACCEPTANCE[key] = (bool(passed), detail)
    print(f"criterion {key}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split(".")[0])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'} ({detail})")
