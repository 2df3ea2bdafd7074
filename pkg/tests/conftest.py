import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def pendulum():
    from lyapcert import bench
    return bench.build("pendulum")


@pytest.fixture(scope="session")
def pendulum_run(tmp_path_factory):
    """Default pendulum synthesis (seed 0), shared by the slow tests."""
    from lyapcert import bench, cegis

    out = tmp_path_factory.mktemp("pendulum_run")
    report = cegis.synthesize(bench.build("pendulum"), cegis.SynthesisConfig(), 0.04, run_dir=out)
    return report


@pytest.fixture(scope="session")
def path_following_run(tmp_path_factory):
    from lyapcert import bench, cegis

    out = tmp_path_factory.mktemp("pf_run")
    return cegis.synthesize(bench.build("path_following"), cegis.SynthesisConfig(), 0.01,
                            run_dir=out)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
