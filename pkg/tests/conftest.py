import numpy as np
import pytest
import torch

from sdacd.core import BiTemporalSample, ChangeMask, Image
from sdacd.data import SyntheticConfig, synthesize_benchmark

torch.set_num_threads(1)


@pytest.fixture
def tiny_set():
    return synthesize_benchmark(SyntheticConfig(n_samples=4, tile_size=32, seed=3))


def make_sample(h=8, w=8, c=3, seed=0, id="s"):
    rng = np.random.default_rng(seed)
    pre = rng.uniform(-1, 1, (h, w, c))
    post = rng.uniform(-1, 1, (h, w, c))
    gt = (rng.uniform(size=(h, w)) < 0.3).astype(np.uint8)
    return BiTemporalSample(Image(pre), Image(post), ChangeMask(gt), id)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    Usage: ``criterion(n, ok, detail)``; the assertion still decides the test.
    """
    def record(number, ok, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in range(1, 10):
            terminalreporter.write_line(ACCEPTANCE_LINES.get(n, f"criterion {n}: NOT RUN"))
