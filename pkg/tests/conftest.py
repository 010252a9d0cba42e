import numpy as np
import pytest

from fdg.config import RunConfig
from fdg.data import batch_stream, gen_synthetic

MLP6 = "dense:24,relu,dense:24,relu,dense:4,head"
MLP8 = "dense:16,relu,dense:16,relu,dense:16,relu,dense:4,head"


def assert_memory_bound(log):
    """Live saved graphs per module never exceed 2(K-k)+1, from meta and from every row."""
    K = log.meta["K"]
    for k, (peak, bound) in enumerate(zip(log.meta["max_live_graphs"], log.meta["graph_bounds"]), 1):
        assert bound == 2 * (K - k) + 1
        assert peak <= bound
    for r in log.rows:
        assert r.live_graphs <= 2 * (K - r.module) + 1


def fdg_config(**kw):
    base = dict(method="fdg", batch_size=32, iterations=50, lr=0.05, momentum=0.9,
                weight_decay=5e-4)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def teacher():
    return gen_synthetic("random-teacher", 480, seed=7, features=10, classes=4)


@pytest.fixture
def stream(teacher):
    def make(seed=0, batch_size=32):
        return batch_stream(teacher, batch_size, seed=seed)
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
