import numpy as np
import pytest

from newsvb import NewsvendorModel, build_posterior, sample_demand


@pytest.fixture(scope="session")
def base_model():
    """Reference configuration used throughout: theta0=0.68, b=0.1, IG(1, 4.1)."""
    return NewsvendorModel(h=0.005, b=0.1, theta0=0.68, alpha=1.0, beta=4.1)


@pytest.fixture(scope="session")
def data_n50(base_model):
    return sample_demand(base_model.theta0, 50, np.random.default_rng(20))


@pytest.fixture(scope="session")
def grid_n50(data_n50, base_model):
    return build_posterior(data_n50, base_model)


@pytest.fixture(scope="session")
def data_n2000(base_model):
    return sample_demand(base_model.theta0, 2000, np.random.default_rng(3))


@pytest.fixture(scope="session")
def grid_n2000(data_n2000, base_model):
    return build_posterior(data_n2000, base_model)
