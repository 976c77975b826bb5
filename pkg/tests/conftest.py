import numpy as np
import pytest

from fspcseg.data import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cloud(rng, m=32, channels=3, scale=1.0) -> PointCloud:
    return PointCloud(rng.uniform(-scale, scale, size=(m, channels)).astype(np.float32))
