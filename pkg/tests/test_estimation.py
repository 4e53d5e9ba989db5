import numpy as np
import pytest
from scipy import stats

from conftest import random_model
from npmlhmm.core import FiniteMixtureDensity, HmmModel, ThetaBox, ValidationError, make_rng, simulate
from npmlhmm.estimation import (
    FitConfig,
    _floored_weights,
    canonical_relabel,
    em_fit,
    em_step,
    initialize,
    npmle_fit,
    split_heaviest,
)
from npmlhmm.likelihood import log_likelihood
from npmlhmm.scenarios import scenario_a

f = FiniteMixtureDensity.gaussian
G2 = np.array([[0.9, 0.1], [0.2, 0.8]])


def _two_state_data(n, seed):
    model = HmmModel.stationary_model(G2, (f(0, 1), f(6, 1)))
    return model, simulate(model, n, seed)


def _iid_mixture_em(y, w, mu, sd, iters=5000, tol=1e-13):
    """Plain i.i.d. Gaussian-mixture EM, written independently of the package."""
    prev = -np.inf
    for _ in range(iters):
        dens = w * stats.norm.pdf(y[:, None], mu, sd)
        ll = np.log(dens.sum(1)).sum()
        r = dens / dens.sum(1, keepdims=True)
        nk = r.sum(0)
        w = nk / y.size
        mu = (r * y[:, None]).sum(0) / nk
        sd = np.sqrt((r * (y[:, None] - mu) ** 2).sum(0) / nk)
        if ll - prev < tol * abs(ll):
            break
        prev = ll
    return ll


def test_em_step_single_gaussian_closed_form():
    y = make_rng(2).normal(3.0, 2.0, 400)
    start = HmmModel([[1.0]], [1.0], (f(0.0, 1.0),))
    new = em_step(start, y)
    assert new.densities[0].means[0] == pytest.approx(y.mean(), abs=1e-12)
    assert new.densities[0].sds[0] == pytest.approx(y.std(), abs=1e-12)


def test_em_step_sd_clamped_to_box():
    y = make_rng(2).normal(3.0, 2.0, 400)
    start = HmmModel([[1.0]], [1.0], (f(0.0, 1.0),))
    new = em_step(start, y, ThetaBox(-10, 10, 0.05, 1.5))
    assert new.densities[0].sds[0] == 1.5


def test_em_step_fixed_point():
    model, s = _two_state_data(2000, 1)
    fit = em_fit(s, 2, 1, FitConfig(rel_tol=1e-14, max_iter=5000, restarts=1))
    again = em_step(fit.model, s, FitConfig().box_for(s.obs))
    np.testing.assert_allclose(again.gamma, fit.model.gamma, atol=1e-8)
    for a, b in zip(again.densities, fit.model.densities):
        np.testing.assert_allclose(a.means, b.means, atol=1e-8)
        np.testing.assert_allclose(a.sds, b.sds, atol=1e-8)


def test_em_step_monotone_from_random_starts():
    s = simulate(scenario_a().model, 500, 3)
    box = FitConfig().box_for(s.obs)
    for seed in range(5):
        model = initialize(s, 3, 2, seed=seed, jitter=1.0)
        prev = log_likelihood(model, s)
        for _ in range(30):
            model = em_step(model, s, box)
            cur = log_likelihood(model, s)
            assert cur >= prev - 1e-9
            prev = cur


def test_floored_weights():
    w, hit = _floored_weights(np.array([5.0, 0.0, 5.0]))
    assert hit and w[1] == 1e-8 and abs(w.sum() - 1) < 1e-15
    w, hit = _floored_weights(np.array([1.0, 3.0]))
    assert not hit
    np.testing.assert_allclose(w, [0.25, 0.75])


def test_em_fit_two_state_recovery():
    _, s = _two_state_data(5000, 5)
    fit = em_fit(s, 2, 1)
    assert np.max(np.abs(fit.model.gamma - G2)) < 0.05
    assert fit.converged
    assert np.all(np.diff(fit.loglik_trace) >= -1e-9)


def test_em_fit_single_state_matches_iid_em():
    rng = make_rng(8)
    y = np.concatenate([rng.normal(-2, 1, 300), rng.normal(2, 0.7, 200)])
    rng.shuffle(y)
    cfg = FitConfig(rel_tol=1e-13, max_iter=5000, restarts=1)
    fit = em_fit(y, 1, 2, cfg)
    start = initialize(y, 1, 2)
    d = start.densities[0]
    oracle = _iid_mixture_em(y, d.weights.copy(), d.means.copy(), d.sds.copy())
    assert fit.loglik == pytest.approx(oracle, abs=1e-6)


def test_gaussian_fit_recovers_gaussian_hmm():
    truth = HmmModel.stationary_model([[0.8, 0.2], [0.3, 0.7]], (f(-1, 1), f(2.5, 0.8)))
    s = simulate(truth, 5000, 21)
    fit = em_fit(s, 2, 1)
    assert np.max(np.abs(fit.model.gamma - truth.gamma)) < 0.05
    assert fit.model.densities[0].means[0] == pytest.approx(-1, abs=0.1)
    assert fit.model.densities[1].sds[0] == pytest.approx(0.8, abs=0.1)
    # starting at the truth cannot beat the restart search beyond the stopping tolerance
    warm = em_fit(s, 2, 1, FitConfig(restarts=1), init=HmmModel(truth.gamma, [0.5, 0.5], truth.densities))
    assert fit.loglik >= warm.loglik - 1e-8 * abs(warm.loglik)


def test_em_fit_requires_enough_data():
    with pytest.raises(ValidationError):
        em_fit([0.0, 1.0], 3, 1)


def test_em_fit_warm_start_checks_sizes():
    _, s = _two_state_data(200, 5)
    with pytest.raises(ValidationError, match="support sizes"):
        em_fit(s, 2, 2, init=initialize(s, 2, 1))


def test_npmle_gaussian_data_stops_early():
    _, s = _two_state_data(2000, 7)
    gauss = em_fit(s, 2, 1)
    fit = npmle_fit(s, 2)
    assert max(fit.support_sizes) <= 3
    assert fit.loglik >= gauss.loglik - 1e-9
    assert fit.m_schedule[0] == 1


def test_npmle_infinite_gain_tol_is_gaussian_fit():
    s = simulate(scenario_a().model, 400, 2)
    cfg = FitConfig(component_gain_tol=np.inf)
    fit = npmle_fit(s, 3, cfg)
    gauss = em_fit(s, 3, 1, cfg)
    assert fit.support_sizes == (1, 1, 1)
    assert fit.loglik == gauss.loglik
    np.testing.assert_array_equal(fit.model.gamma, gauss.model.gamma)


def test_npmle_schedule_and_support_bound():
    s = simulate(scenario_a().model, 400, 4)
    fit = npmle_fit(s, 3, FitConfig(max_components=4))
    assert fit.m_schedule == list(range(1, len(fit.m_schedule) + 1))
    assert max(fit.support_sizes) <= 4
    assert sum(fit.support_sizes) <= 3 * s.n + 1
    accepted = fit.stage_logliks[: len(fit.m_schedule)]
    assert all(b - a > 2.0 for a, b in zip(accepted, accepted[1:]))


def test_initialize_single_state():
    y = make_rng(1).normal(size=101)
    model = initialize(y, 1, 1)
    assert model.densities[0].means[0] == pytest.approx(np.median(y), abs=1e-12)
    assert model.densities[0].sds[0] == pytest.approx(y.std(), abs=1e-12)


def test_initialize_seeded_and_ordered():
    s = simulate(scenario_a().model, 1000, 3)
    a = initialize(s, 3, 2, seed=5)
    b = initialize(s, 3, 2, seed=5)
    for x, y in zip(a.densities, b.densities):
        np.testing.assert_array_equal(x.means, y.means)
    plain = initialize(s, 3, 1)
    means = [d.means[0] for d in plain.densities]
    assert means == sorted(means)
    assert means[0] < np.quantile(s.obs, 0.25) and means[-1] > np.quantile(s.obs, 0.75)
    np.testing.assert_allclose(np.diag(plain.gamma), 0.5)


def test_canonical_relabel():
    g = np.array([[0.9, 0.1], [0.3, 0.7]])
    model = HmmModel(g, [0.5, 0.5], (f(5, 1), f(-2, 1)))
    new, perm = canonical_relabel(model)
    np.testing.assert_array_equal(perm, [1, 0])
    np.testing.assert_array_equal(new.gamma, [[0.7, 0.3], [0.1, 0.9]])
    again, perm2 = canonical_relabel(new)
    np.testing.assert_array_equal(perm2, [0, 1])
    np.testing.assert_array_equal(again.gamma, new.gamma)


def test_canonical_relabel_ties():
    model = HmmModel(np.full((3, 3), 1 / 3), [1 / 3] * 3, (f(0, 2), f(0, 1), f(0, 1)))
    _, perm = canonical_relabel(model)
    np.testing.assert_array_equal(perm, [1, 2, 0])


def test_label_swap_likelihood_exact():
    rng = make_rng(4)
    model = random_model(rng, 3, m=2)
    s = simulate(model, 300, 1)
    relabeled = model.permute([2, 0, 1])
    uniform = HmmModel(model.gamma, [1 / 3] * 3, model.densities)
    assert log_likelihood(uniform, s) == log_likelihood(canonical_relabel(uniform)[0], s)
    assert abs(log_likelihood(model, s) - log_likelihood(relabeled, s)) < 1e-9


def test_split_heaviest():
    model = HmmModel([[1.0]], [1.0], (FiniteMixtureDensity([0.3, 0.7], [0, 4], [1, 2]),))
    new = split_heaviest(model, ThetaBox(-10, 10))
    d = new.densities[0]
    np.testing.assert_allclose(d.weights, [0.3, 0.35, 0.35])
    np.testing.assert_allclose(d.means, [0, 3, 5])


def test_fit_config_validation():
    with pytest.raises(ValidationError):
        FitConfig(max_iter=0)
    with pytest.raises(ValidationError):
        FitConfig(rel_tol=0)
    with pytest.raises(ValidationError):
        FitConfig(restarts=0)


def test_trace_monotone_and_digest():
    s = simulate(scenario_a().model, 500, 9)
    fit = em_fit(s, 3, 2)
    assert np.all(np.diff(fit.loglik_trace) >= -1e-9)
    assert fit.series_digest == s.digest()
    assert fit.loglik == fit.loglik_trace[-1]


def test_consistency_smoke():
    truth = HmmModel.stationary_model(
        [[0.7, 0.2, 0.1], [0.2, 0.6, 0.2], [0.1, 0.3, 0.6]], (f(-3, 1), f(0, 1), f(3.5, 1.2))
    )
    medians = []
    for n in (500, 2000, 8000):
        errs = []
        for r in range(20):
            s = simulate(truth, n, 1000 * n + r)
            fit = em_fit(s, 3, 1, FitConfig(restarts=2))
            errs.append(np.max(np.abs(fit.model.gamma - truth.gamma)))
        medians.append(np.median(errs))
    assert medians[0] > medians[1] > medians[2]
