import numpy as np
import pytest

import reflectedsde as rs


@pytest.fixture
def unit_interval():
    return rs.interval(-1.0, 1.0)


@pytest.fixture
def unit_box():
    return rs.box([0.0, 0.0], [1.0, 1.0])


@pytest.fixture
def unit_ball():
    return rs.ball(1.0, dim=2)


@pytest.fixture
def thick_annulus():
    return rs.annulus(0.5, 1.5, dim=2)


@pytest.fixture
def wavy_coeffs():
    """The standard 1-d test problem: sigma(y) = 0.5 + 0.2 sin y, b(y) = -0.3 y."""
    return rs.trig([[0.5]], [[0.2]], [1.0], drift_matrix=[[-0.3]])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
