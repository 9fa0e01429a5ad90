# shared fixtures and markers

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains a network; minutes rather than seconds")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gradient_image():
    """smooth 16x16 ramp with a bright square"""
    y, x = np.mgrid[0:16, 0:16]
    img = 0.2 + 0.02 * x + 0.01 * y
    img[5:9, 6:10] = 0.9
    return img.astype(np.float32)
