import numpy as np
import pytest

from dualrl.policy import FeatureConfig, FeatureMap
from dualrl.synthenv import EnvConfig, generate_instance


@pytest.fixture
def env():
    return EnvConfig()


@pytest.fixture
def fmap(env):
    return FeatureMap(env, FeatureConfig())


@pytest.fixture
def instances(env):
    return [generate_instance(s, env) for s in range(20)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            props = dict(rep.user_properties)
            num = int(rep.nodeid.split("test_criterion_")[1].split("_")[0])
            lines.append((num, f"criterion {num:2d} [{outcome.upper()[:4]}] {props.get('name', '')}: "
                               f"{props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
