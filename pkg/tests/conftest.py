import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from ctxgraph.worker import TaskRegistry, load_registry  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

SAMPLES = os.path.join(os.path.dirname(os.path.dirname(__file__)), "samples")


@pytest.fixture
def registry() -> TaskRegistry:
    return load_registry()


@pytest.fixture
def sample():
    def path(name):
        return os.path.join(SAMPLES, name)

    return path


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
