import numpy as np
import pytest

from dfcikit.media_io import save_frame_sequence, save_mask_sequence, write_raster
from dfcikit.synthetic import layered_scene


@pytest.fixture
def write_ppm(tmp_path):
    """Write a uint8 image into tmp_path under ``name``."""

    def _write(name, arr, subdir="frames"):
        d = tmp_path / subdir
        d.mkdir(exist_ok=True)
        write_raster(d / name, np.asarray(arr, dtype=np.uint8))
        return d

    return _write


@pytest.fixture(scope="session")
def scene_dirs(tmp_path_factory):
    """A small gt/gen pair on disk: static background, square moving at different speeds."""
    root = tmp_path_factory.mktemp("scene")
    L = 6
    gt, mgt = layered_scene(32, 32, [(4 + 1.0 * i, 6) for i in range(L)], box=12)
    gen, mgen = layered_scene(32, 32, [(4 + 1.5 * i, 6 + 0.5 * i) for i in range(L)], box=12)
    save_frame_sequence(gt, root / "gt")
    save_frame_sequence(gen, root / "gen")
    save_mask_sequence(mgt, root / "mgt")
    save_mask_sequence(mgen, root / "mgen")
    return root


ACCEPTANCE_RESULTS = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome for the end-of-run summary."""

    def _record(label, passed, detail=""):
        ACCEPTANCE_RESULTS.append((label, bool(passed), detail))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")
