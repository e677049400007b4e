import pytest

import iacd
from iacd.rng import substream


@pytest.fixture(scope="session")
def exp_innov():
    return iacd.InnovationSpec.exponential()


@pytest.fixture(scope="session")
def theta_boundary():
    return iacd.ParamTheta(1.0, 0.5, 0.5)


@pytest.fixture(scope="session")
def boundary_series(theta_boundary, exp_innov):
    """Medium simulated series at the unit-persistence boundary."""
    cfg = iacd.SimConfig(theta0=theta_boundary, innov=exp_innov, t_span=1.2e5, seed=20240613)
    return iacd.simulate_span(cfg)


@pytest.fixture(scope="session")
def boundary_fit_pair(boundary_series):
    fit_u = iacd.fit_unrestricted(boundary_series)
    fit_r = iacd.fit_restricted(boundary_series)
    return fit_u, fit_r


def make_rng(*path):
    return substream(987654321, *path)
