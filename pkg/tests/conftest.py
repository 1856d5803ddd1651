import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir,
                                'finsler_berwald'))

from norms import QuadratureParams  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope='session')
def small_quad():
    # equispaced circle directions are spectrally accurate for smooth planar norms
    return QuadratureParams(directions=512, radial_nodes=8)
