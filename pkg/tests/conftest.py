import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import HealthCheck, settings  # noqa: E402

from softaug.nets.layers import NetworkShapes  # noqa: E402
from softaug.sac import SACAgent, SACConfig  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_shapes(**kw) -> NetworkShapes:
    """A network small enough for finite differences (< 10^3 parameters)."""
    base = dict(
        obs_channels=3, obs_size=7, encoder_depth=1, filters=2, strides=(2,), kernel_size=3,
        feature_dim=4, hidden_dim=8, projection_dim=4, projection_hidden=8, action_dim=2,
    )
    base.update(kw)
    return NetworkShapes(**base)


def to_float64(agent: SACAgent) -> SACAgent:
    for k in list(agent.params):
        agent.params[k] = agent.params[k].astype(np.float64)
    tgt = agent.critic_target.target
    for k in list(tgt):
        tgt[k] = tgt[k].astype(np.float64)
    return agent


@pytest.fixture
def shapes() -> NetworkShapes:
    return tiny_shapes()


@pytest.fixture
def agent(shapes) -> SACAgent:
    return SACAgent(shapes, SACConfig(batch_rl=8), np.random.default_rng(0))


# one pass/fail line per acceptance criterion at the end of the run
_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[name] = "PASS" if report.outcome == "passed" else report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")

    def order(name):
        digits = "".join(ch if ch.isdigit() else " " for ch in name).split()
        return int(digits[0]) if digits else 0

    for name in sorted(_CRITERIA, key=order):
        terminalreporter.write_line(f"{_CRITERIA[name]:<7} {name}")
