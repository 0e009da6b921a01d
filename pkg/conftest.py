# conftest.py - Shared pytest fixtures
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from services import nn_ops  # noqa: E402
from services.decomposition import DecompositionPlan  # noqa: E402
from services.lsk_module import LskConfig  # noqa: E402
from utils.helpers import set_thread_count  # noqa: E402


@pytest.fixture(autouse=True)
def _restore_threads():
    yield
    set_thread_count(None)


@pytest.fixture
def serial():
    """Run every convolution on the calling thread."""
    set_thread_count(1)


@pytest.fixture
def parallel(monkeypatch):
    """Force output-channel slabs onto four workers, even for tiny convolutions."""
    monkeypatch.setattr(nn_ops, "_PARALLEL_MIN_WORK", 0)
    set_thread_count(4)


@pytest.fixture
def two_branch_cfg():
    return LskConfig(channels=3, plan=DecompositionPlan.of(((3, 1), (5, 2))))


@pytest.fixture
def workdir(tmp_path):
    return str(tmp_path)
