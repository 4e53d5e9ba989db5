import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import random_ergodic_gamma
from npmlhmm.core import (
    CompoundDensity,
    ContinuousMixtureTruth,
    FiniteMixtureDensity,
    HmmModel,
    ObservationSeries,
    ThetaBox,
    ValidationError,
    density_eval,
    is_ergodic,
    make_rng,
    period,
    simulate,
    stationary_distribution,
    truth_density_eval,
    validate_model,
)
from npmlhmm.identification import counterexample_gamma
from npmlhmm.scenarios import GAMMA_3STATE, scenario_a

G2 = np.array([[0.9, 0.1], [0.2, 0.8]])


def test_stationary_three_state():
    pi = stationary_distribution(GAMMA_3STATE)
    np.testing.assert_allclose(pi, [4 / 11, 3 / 11, 4 / 11], atol=1e-12)


def test_stationary_closed_forms():
    np.testing.assert_allclose(stationary_distribution([[0.5, 0.5], [0.5, 0.5]]), [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(stationary_distribution(G2), [2 / 3, 1 / 3], atol=1e-12)


def test_stationary_rejects_non_ergodic():
    with pytest.raises(ValidationError, match="stationary"):
        stationary_distribution([[0, 1], [1, 0]])
    with pytest.raises(ValidationError):
        stationary_distribution([[1, 0], [0.5, 0.5]])


def test_stationary_balance_random(rng):
    for K in range(1, 7):
        for _ in range(20):
            g = random_ergodic_gamma(rng, K, full_rank=False)
            pi = stationary_distribution(g)
            assert np.max(np.abs(pi @ g - pi)) < 1e-12
            assert abs(pi.sum() - 1) < 1e-12


def test_period_and_ergodicity():
    cyc = np.roll(np.eye(3), 1, axis=1)
    assert period(cyc) == 3
    assert not is_ergodic(cyc)
    assert is_ergodic([[0, 1, 0], [0, 0, 1], [0.5, 0.5, 0]])
    # exact zero pattern decides, not a threshold
    assert is_ergodic([[1 - 1e-15, 1e-15], [1.0, 0.0]])


def test_transition_matrix_validation():
    with pytest.raises(ValidationError):
        HmmModel([[0.5, 0.6], [0.5, 0.5]], [0.5, 0.5], (FiniteMixtureDensity.gaussian(0, 1),) * 2)
    with pytest.raises(ValidationError, match="K mismatch"):
        HmmModel(G2, [0.5, 0.5], (FiniteMixtureDensity.gaussian(0, 1),))
    with pytest.raises(ValidationError, match="stationary"):
        HmmModel(G2, [0.5, 0.5], (FiniteMixtureDensity.gaussian(0, 1),) * 2, stationary=True)


def test_mixture_validation():
    with pytest.raises(ValidationError):
        FiniteMixtureDensity([0.5, 0.4], [0, 1], [1, 1])
    with pytest.raises(ValidationError):
        FiniteMixtureDensity([1.0, 0.0], [0, 1], [1, 1])
    with pytest.raises(ValidationError):
        FiniteMixtureDensity([1.0], [0.0], [0.0])


def test_density_eval_values():
    assert density_eval(FiniteMixtureDensity.gaussian(0, 1), 0.0) == pytest.approx(1 / np.sqrt(2 * np.pi), rel=1e-14)
    f1 = scenario_a().model.densities[0]
    oracle = sum(w * stats.norm.pdf(-7.5, m, 2) for w, m in zip([0.33, 0.33, 0.34], [-10, -7.5, -4]))
    assert density_eval(f1, -7.5) == pytest.approx(oracle, rel=1e-12)
    assert density_eval(f1, -7.5) == pytest.approx(0.110630, abs=5e-6)
    y = np.linspace(-4, 4, 9)
    np.testing.assert_allclose(density_eval(FiniteMixtureDensity([1.0], [0.3], [1.7]), y), stats.norm.pdf(y, 0.3, 1.7))


@settings(max_examples=30, deadline=None)
@given(
    st.lists(
        st.tuples(st.floats(0.05, 1.0), st.floats(-20, 20), st.floats(0.05, 5.0)),
        min_size=1,
        max_size=5,
    )
)
def test_density_integrates_to_one(parts):
    w = np.array([p[0] for p in parts])
    f = FiniteMixtureDensity(w / w.sum(), [p[1] for p in parts], [p[2] for p in parts])
    y = np.arange(-50, 50 + 1e-9, 1e-3)
    vals = density_eval(f, y)
    assert np.all(vals >= 0)
    assert abs(np.trapezoid(vals, y) - 1) < 1e-6


def test_mixture_moments_and_cdf():
    f = FiniteMixtureDensity([0.3, 0.7], [-1.0, 2.0], [0.5, 1.5])
    y = np.linspace(-10, 12, 20001)
    p = f.pdf(y)
    assert np.trapezoid(y * p, y) == pytest.approx(f.mean, abs=1e-6)
    assert np.sqrt(np.trapezoid((y - f.mean) ** 2 * p, y)) == pytest.approx(f.sd, abs=1e-5)
    assert f.cdf(1.0) == pytest.approx(0.3 * stats.norm.cdf(1, -1, 0.5) + 0.7 * stats.norm.cdf(1, 2, 1.5))


def test_mix_identity():
    a, b = FiniteMixtureDensity.gaussian(0, 1), FiniteMixtureDensity([0.5, 0.5], [3, 4], [1, 2])
    y = np.linspace(-5, 9, 50)
    np.testing.assert_allclose(a.mix(b, 0.3).pdf(y), 0.3 * a.pdf(y) + 0.7 * b.pdf(y), rtol=1e-13)


def test_truth_density_normalised():
    f2 = scenario_a().model.densities[1]
    y = np.linspace(-30, 30, 2000)
    assert abs(np.trapezoid(truth_density_eval(f2, y), y) - 1) < 1e-4
    f3 = scenario_a().model.densities[2]
    y = np.linspace(-10, 60, 4000)
    assert abs(np.trapezoid(f3.pdf(y), y) - 1) < 1e-4


def test_truth_quadrature_converged():
    for f in scenario_a().model.densities[1:]:
        fine = ContinuousMixtureTruth(f.a, f.b, f.loc, f.scale, f.sd_lo, f.sd_hi, 2 * f.quadrature_nodes)
        y = np.array(scenario_a().eval_grid[1] + scenario_a().eval_grid[2])
        assert np.max(np.abs(fine.pdf(y) - f.pdf(y))) < 1e-8


def test_truth_narrow_limit():
    narrow = ContinuousMixtureTruth(200, 200, 1.0, 1e-3, 1.0, 1.0 + 1e-6)
    y = np.linspace(-3, 5, 17)
    np.testing.assert_allclose(narrow.pdf(y), stats.norm.pdf(y, 1.0005, 1.0), atol=1e-5)


def test_truth_cdf_matches_sampling():
    f = scenario_a().model.densities[2]
    x = f.sample(make_rng(3), 200000)
    g = np.quantile(x, [0.05, 0.3, 0.5, 0.8, 0.97])
    np.testing.assert_allclose((x[:, None] <= g).mean(0), f.cdf(g), atol=4e-3)
    assert x.mean() == pytest.approx(f.mean, abs=0.03)
    assert x.std() == pytest.approx(f.sd, abs=0.03)


def test_truth_parameter_checks():
    with pytest.raises(ValidationError):
        ContinuousMixtureTruth(2, 2, 0, 1, 4, 1)
    with pytest.raises(ValidationError):
        ContinuousMixtureTruth(2, 2, 0, 1, 1, 4, quadrature_nodes=8)


def test_compound_density():
    a, b = scenario_a().model.densities[:2]
    c = CompoundDensity((0.4, 0.6), (a, b))
    y = np.array([-3.0, 0.0, 2.0])
    np.testing.assert_allclose(c.pdf(y), 0.4 * a.pdf(y) + 0.6 * b.pdf(y))
    with pytest.raises(ValidationError):
        CompoundDensity((0.4, 0.5), (a, b))


def test_validate_model_scenario():
    rep = validate_model(scenario_a().model)
    assert rep.full_rank and rep.ergodic and rep.densities_distinct and rep.ok
    assert "full rank: True" in rep.summary()


def test_validate_model_failures():
    f = FiniteMixtureDensity.gaussian
    rep = validate_model(HmmModel([[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5], (f(0, 1), f(3, 1))))
    assert not rep.full_rank and rep.ergodic
    same = FiniteMixtureDensity([0.5, 0.5], [0, 2], [1, 1])
    rep = validate_model(HmmModel(GAMMA_3STATE, [1 / 3] * 3, (f(-3, 1), same, same)))
    assert not rep.densities_distinct
    assert rep.identical_pairs == [(1, 2)]
    assert (0, 1) in rep.distinct_witnesses


def test_counterexample_gamma_rank_deficient():
    f = FiniteMixtureDensity.gaussian
    g1 = counterexample_gamma(G2, 0.3, 0.6)
    model = HmmModel.stationary_model(g1, (f(-2, 1), f(0, 1), f(2, 1)))
    assert np.linalg.matrix_rank(g1) == 2
    assert not validate_model(model).full_rank


def test_theta_box_from_data():
    obs = np.array([-1.0, 0.0, 3.0])
    box = ThetaBox.from_data(obs)
    assert box.mean_lo == -2.0 and box.mean_hi == 4.0
    assert box.sd_lo == 0.05 and box.sd_hi == pytest.approx(2 * obs.std())
    assert box.contains([0.0], [1.0]) and not box.contains([5.0], [1.0])


def test_simulate_iid_standard_normal():
    model = HmmModel([[1.0]], [1.0], (FiniteMixtureDensity.gaussian(0, 1),))
    s = simulate(model, 10**6, 7)
    assert abs(s.obs.mean()) < 0.005
    assert stats.kstest(s.obs[:20000], "norm").pvalue > 1e-3


def test_simulate_state_frequencies_and_transitions():
    s = simulate(scenario_a().model, 10**6, 11)
    freq = np.bincount(s.states, minlength=3) / s.n
    np.testing.assert_allclose(freq, [4 / 11, 3 / 11, 4 / 11], atol=0.005)
    counts = np.zeros((3, 3))
    np.add.at(counts, (s.states[:-1], s.states[1:]), 1)
    assert np.max(np.abs(counts / counts.sum(1, keepdims=True) - GAMMA_3STATE)) < 0.01


def test_simulate_emissions_follow_state_laws():
    model = scenario_a().model
    s = simulate(model, 30000, 5)
    for k, f in enumerate(model.densities):
        x = s.obs[s.states == k]
        assert stats.kstest(x, f.cdf).pvalue > 1e-3


def test_simulate_deterministic():
    a = simulate(scenario_a().model, 500, 42)
    b = simulate(scenario_a().model, 500, 42)
    c = simulate(scenario_a().model, 500, 43)
    assert a.obs.tobytes() == b.obs.tobytes() and np.array_equal(a.states, b.states)
    assert a.digest() == b.digest() != c.digest()


def test_rng_streams():
    x = make_rng(1, 0).random(5)
    np.testing.assert_array_equal(x, make_rng(1, 0).random(5))
    assert not np.array_equal(x, make_rng(1, 1).random(5))
    assert not np.array_equal(x, make_rng(2, 0).random(5))


def test_observation_series_validation():
    with pytest.raises(ValidationError):
        ObservationSeries([])
    with pytest.raises(ValidationError):
        ObservationSeries([0.0, np.nan])
    with pytest.raises(ValidationError):
        ObservationSeries([0.0, 1.0], states=[0])


def test_permute_roundtrip(rng):
    from conftest import random_model

    m = random_model(rng, 4)
    p = np.array([2, 0, 3, 1])
    back = m.permute(p).permute(np.argsort(p))
    np.testing.assert_array_equal(back.gamma, m.gamma)
    np.testing.assert_array_equal(back.initial, m.initial)
