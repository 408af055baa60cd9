import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from csmfit.templates import build_template  # noqa: E402
from csmfit.mesh_param import equalize_areas, spherical_embed_init  # noqa: E402

from synth import make_observation  # noqa: E402


@pytest.fixture(scope="session")
def quadruped():
    return build_template("quadruped")


@pytest.fixture(scope="session")
def quad_sphere(quadruped):
    return equalize_areas(quadruped.mesh, spherical_embed_init(quadruped.mesh), steps=200)


@pytest.fixture(scope="session")
def quad_scene(quadruped, quad_sphere):
    """A fixed articulated, rotated quadruped observation at 128x128."""
    return make_observation(quadruped, quad_sphere, np.random.default_rng(123), size=128)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
