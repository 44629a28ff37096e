import numpy as np
import pytest

from sevuln import data_path, estimate_state, load_case, load_config, synthesize_measurements
from sevuln.network import Branch, Bus, Network


@pytest.fixture(scope="session")
def net4():
    return load_case(data_path("case4.m"))


@pytest.fixture(scope="session")
def cfg4(net4):
    return load_config(data_path("meas4.json"), net4)


@pytest.fixture(scope="session")
def net39():
    return load_case(data_path("case39.m"))


@pytest.fixture(scope="session")
def cfg39(net39):
    return load_config(data_path("meas39.json"), net39)


@pytest.fixture(scope="session")
def noisy4(net4, cfg4):
    ms = synthesize_measurements(net4, cfg4, 1.0, seed=1)
    return ms, estimate_state(net4, ms)


@pytest.fixture(scope="session")
def clean4(net4, cfg4):
    ms = synthesize_measurements(net4, cfg4, 0.0)
    return ms, estimate_state(net4, ms)


def two_bus(x=0.1, r=0.0, load=(0.5, 0.2)):
    """Slack at bus 1 feeding a PQ load at bus 2 over one line."""
    return Network(
        buses=(
            Bus(0, bus_kind="slack", v_setpoint=1.0),
            Bus(1, demand_p=load[0], demand_q=load[1]),
        ),
        branches=(Branch(0, 1, r, x),),
    )


@pytest.fixture
def net2():
    return two_bus()


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
