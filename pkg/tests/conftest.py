import numpy as np
import pytest

from lwm.data import LatentGrid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_grid(rng, t=4, h=2, w=3, d=8, t0=0.0, dt=0.25) -> LatentGrid:
    data = rng.standard_normal((t, h, w, d)).astype(np.float32)
    ts = t0 + dt * np.arange(t, dtype=np.float64)
    return LatentGrid(data, ts)
