import numpy as np
import pytest

from nucuap.detector import BlobDetector, DetectorConfig
from nucuap.scene import generate_scene, random_scene_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    """A 32x32 RGB scene with two moving disks over four frames."""
    spec = random_scene_spec(seed=5, height=32, width=32, frame_count=4, radius=5, min_gap=4)
    return generate_scene(spec)


@pytest.fixture(scope="session")
def detector():
    return BlobDetector(DetectorConfig())


_ACCEPTANCE = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, store, number, title):
        self.store, self.number, self.title, self.notes = store, number, title, []

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.notes)
        self.store[self.number] = f"[{status}] criterion {self.number}: {self.title}" + (
            f" ({detail})" if detail else ""
        )
        return False


@pytest.fixture
def criterion(request):
    store = request.config.stash.setdefault(_ACCEPTANCE, {})
    return lambda number, title: _Criterion(store, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        terminalreporter.write_line(store[number])
