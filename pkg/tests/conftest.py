import numpy as np
import pytest

from fedgmm.gmm import CovarianceType, GmmParams


def random_gmm(rng, k, d, cov_type=CovarianceType.DIAGONAL, spread=1.0):
    weights = rng.dirichlet(np.ones(k))
    means = rng.uniform(-spread, spread, size=(k, d))
    if cov_type is CovarianceType.DIAGONAL:
        covs = rng.uniform(0.05, 0.5, size=(k, d))
    else:
        a = rng.normal(size=(k, d, d)) * 0.3
        covs = a @ np.transpose(a, (0, 2, 1)) + 0.1 * np.eye(d)
    return GmmParams(weights, means, covs, cov_type)


def separated_mixture(k=3, d=2, sigma=0.1, gap=10.0):
    """k diagonal components whose centers sit ``gap`` sigmas apart along a line."""
    means = np.zeros((k, d))
    means[:, 0] = np.arange(k) * gap * sigma
    return GmmParams(np.full(k, 1.0 / k), means, np.full((k, d), sigma**2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
