import numpy as np
import pytest

from thinspect import synth
from thinspect.geometry import PinholeCamera
from thinspect.pipeline import run_setup

CAM = PinholeCamera(1733.0, 1024, 1024)


@pytest.fixture(scope="session")
def cam():
    return CAM


@pytest.fixture(scope="session")
def components():
    return {f: synth.build_component(synth.default_spec(f)) for f in synth.FAMILIES}


@pytest.fixture(scope="session")
def artifacts(components):
    return {f: run_setup(c.mesh, c.grasp) for f, c in components.items()}


@pytest.fixture(scope="session")
def header(components):
    return components["header_grid"]


@pytest.fixture(scope="session")
def header_art(artifacts):
    return artifacts["header_grid"]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
