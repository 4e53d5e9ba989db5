import numpy as np
import pytest

from npmlhmm.core import FiniteMixtureDensity, HmmModel, is_ergodic, make_rng

ACCEPTANCE_LINES = []


def random_ergodic_gamma(rng, K, full_rank=True):
    while True:
        g = rng.dirichlet(np.full(K, 1.0), size=K)
        if not is_ergodic(g):
            continue
        if full_rank and K > 1 and np.linalg.svd(g, compute_uv=False)[-1] < 1e-3:
            continue
        return g


def random_model(rng, K, m=1, stationary=False, spread=3.0):
    """Random Gaussian-mixture HMM with well separated state means."""
    g = random_ergodic_gamma(rng, K)
    dens = []
    for k in range(K):
        w = rng.dirichlet(np.full(m, 2.0))
        mu = spread * k + rng.normal(0, 0.5, m)
        sd = rng.uniform(0.6, 1.6, m)
        dens.append(FiniteMixtureDensity(w, mu, sd))
    if stationary:
        return HmmModel.stationary_model(g, dens)
    return HmmModel(g, rng.dirichlet(np.ones(K)), dens)


@pytest.fixture
def rng():
    return make_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
