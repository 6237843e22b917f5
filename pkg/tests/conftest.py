import logging

import numpy as np
import pytest

from stgkit.rng import make_rng


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture(autouse=True)
def quiet_graph_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="stgkit")
    yield


def finite_diff(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g
