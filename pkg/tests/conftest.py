import os

import numpy as np
import pytest
from hypothesis import settings

from eventmem.backends import MockBackend
from eventmem.forest import EventForest
from eventmem.stream_core import EngineConfig, FrameRef
from eventmem.tiers import WindowBatch

settings.register_profile("ci", max_examples=200, deadline=None)
settings.register_profile("dev", max_examples=50, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dev"))


@pytest.fixture
def cfg():
    return EngineConfig()


@pytest.fixture
def mock():
    return MockBackend(EngineConfig().embed_dim)


def window(i: int, length: float = 32.0, frames: int = 2) -> WindowBatch:
    start = i * length
    kf = tuple(FrameRef(start + j * length / frames, f"w{i}f{j}", f"cap {i} {j}") for j in range(frames))
    return WindowBatch(start, start + length, kf, frames)


def random_forest(rng: np.random.Generator, n_windows: int, dim: int = 8, n_r: int = 4, lam: float = 0.1,
                  n_f: int = 4) -> EventForest:
    """Forest grown by the real insertion path with random leaf/merge embeddings."""
    forest = EventForest(n_r, lam, n_f, dim)

    def fuse(a, b):
        return f"({a.summary}+{b.summary})", rng.standard_normal(dim)

    for i in range(n_windows):
        forest.insert_leaf(window(i, frames=int(rng.integers(1, 6))), f"L{i}", rng.standard_normal(dim), fuse)
    return forest


# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
