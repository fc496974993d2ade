import numpy as np
import pytest

from matte.backends import ToyBackend


@pytest.fixture
def backend():
    return ToyBackend()


@pytest.fixture
def reference_image():
    return np.random.default_rng(11).random((16, 16))


@pytest.fixture
def reference_rgb():
    rgb = np.zeros((16, 16, 3), dtype=np.uint8)
    rgb[:8, :8] = (200, 30, 30)
    rgb[:8, 8:] = (30, 30, 180)
    rgb[8:, :8] = (240, 240, 240)
    rgb[8:, 8:] = (20, 20, 20)
    return rgb
