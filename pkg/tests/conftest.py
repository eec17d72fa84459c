import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rccm.dynamics import benchmark_disturbance, quadrotor_model
from rccm.metric import MetricPolynomial
from rccm.sim import data_path

settings.register_profile("rccm", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rccm")


@pytest.fixture(scope="session")
def quad():
    return quadrotor_model()


@pytest.fixture(scope="session")
def dist():
    return benchmark_disturbance()


@pytest.fixture(scope="session")
def metric():
    return MetricPolynomial.load(data_path("quadrotor_metric.json"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {num:>2}: {status}  {detail}")
