import os

# let the worker-count tests run several threads even on a single-core machine
os.environ.setdefault("NUMBA_NUM_THREADS", "4")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from wbgs.renderer import set_workers  # noqa: E402
from wbgs.scene import Material, RxPose, Scene, room  # noqa: E402

set_workers(os.cpu_count())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def box_room():
    return room()


def empty_scene(rx=(0.0, 0.0, 0.0), half=5.0):
    return Scene(((-half, -half, -half), (half, half, half)), RxPose(tuple(rx)))


def conductor():
    return Material("pec", 1.0, 0.0, float("inf"), 0.0, 1.0, 0.01)


# acceptance criteria report their outcome here; printed after the run
CRITERIA = {}


def record(criterion, passed: bool, detail: str) -> None:
    CRITERIA[str(criterion)] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: (int(k[0]), k)):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"CRITERION {key}: {'PASS' if ok else 'FAIL'} - {detail}")
