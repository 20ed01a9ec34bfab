import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bevgather.geometry import CameraModel, DepthBinning, VoxelGrid  # noqa: E402
from bevgather.indexgraph import build_index_graph  # noqa: E402
from bevgather.synthio import RigSpec, StackSpec, make_rig, make_stacks  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"

# Frozen ring6 fixture: 4x50x50 grid around the ego vehicle.
RING_GRID = VoxelGrid(origin=(-40.0, -40.0, -2.0), voxel_size=(1.6, 1.6, 1.0), dims=(4, 50, 50))
RING_BINNING = DepthBinning(1.0, 61.0, 60)
RING_CHANNELS = 8


def toy_camera(cam_id=0, extrinsic=None, width=640, height=480):
    k = [[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]]
    return CameraModel(cam_id, k, np.eye(4) if extrinsic is None else extrinsic, width, height)


@pytest.fixture(scope="session")
def ring_rig():
    return make_rig(RigSpec(preset="ring6"))


@pytest.fixture(scope="session")
def ring_graph(ring_rig):
    return build_index_graph(RING_GRID, ring_rig, RING_BINNING)


@pytest.fixture(scope="session")
def ring_stacks(ring_rig):
    return make_stacks(StackSpec(features="random", depth="softmax", channels=RING_CHANNELS, seed=11),
                       ring_rig, RING_BINNING)


# One PASS/FAIL line per acceptance criterion in the terminal summary.
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        key = marker
        previous = _criteria.get(key, "PASS")
        _criteria[key] = "PASS" if previous == "PASS" and report.outcome == "passed" else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report._criterion = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status in sorted(_criteria.items()):
        terminalreporter.write_line(f"criterion {number}: {title:<48} {status}")
