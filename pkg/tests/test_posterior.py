import math

import numpy as np
import pytest
from scipy import integrate, stats

from implicit_design.core import DesignPoint, InvalidArgument, TruncatedNormalPrior, sample_prior
from implicit_design.lfire import RatioModel, identity_ratio
from implicit_design.posterior import (DegenerateWeights, compute_weights, default_death_grid,
                                       exact_death_posterior, grid_quantiles, kde_fit, likelihood_weights,
                                       normalise_log_weights, resample, summarize, trapezoid_normalise)
from implicit_design.simulators import DeathConfig, DeathModel, simulate_death
from implicit_design.utility import LfireConfig, UtilityObjective, fit_ratios


def _shifted(model, shift):
    return RatioModel(model.intercept + shift, model.coefficients, model.feature_map)


def test_equal_ratios_give_uniform_weights(rng):
    bank = rng.random((10, 1))
    wp = compute_weights([identity_ratio(1)] * 10, np.array([3.0]), bank)
    assert np.allclose(wp.weights, 0.1)
    assert wp.ess == pytest.approx(10.0)


def test_dominant_ratio_takes_all_weight(rng):
    models = [identity_ratio(1)] * 9 + [_shifted(identity_ratio(1), 25.0)]
    wp = compute_weights(models, np.array([3.0]), rng.random((10, 1)))
    assert wp.weights[-1] > 0.999
    assert wp.ess == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(InvalidArgument):
        compute_weights(models[:3], np.array([3.0]), rng.random((10, 1)))


def test_degenerate_weights():
    with pytest.raises(DegenerateWeights):
        normalise_log_weights(np.zeros((3, 1)), np.full(3, -np.inf))


def test_lfire_weights_close_to_exact_weights():
    cfg = DeathConfig()
    obj = UtilityObjective(DeathModel(cfg), TruncatedNormalPrior(), n_prior=300, lfire=LfireConfig(M=1000), seed=2)
    d = DesignPoint((1.4,))
    ratios = fit_ratios(obj, d)
    rng = np.random.default_rng(0)
    for _ in range(3):
        y = simulate_death(1.5, d, cfg, rng)
        w_lfire = compute_weights(ratios.models, y, obj.thetas).weights
        w_exact = likelihood_weights(y, d, obj.thetas, cfg).weights
        assert 0.5 * np.abs(w_lfire - w_exact).sum() < 0.15


def test_resampling_uniform_frequencies():
    n, count = 20, 200_000
    wp = normalise_log_weights(np.arange(n, dtype=float)[:, None], np.zeros(n))
    ps = resample(wp, count, np.random.default_rng(1))
    freq = np.bincount(ps.indices, minlength=n)
    band = 3 * math.sqrt(count * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(freq - count / n) < band)
    assert stats.chisquare(freq).pvalue > 1e-3


def test_resampling_non_uniform_chi_square():
    w = np.array([0.5, 0.25, 0.125, 0.0625, 0.0625])
    wp = normalise_log_weights(np.arange(5.0)[:, None], np.log(w))
    ps = resample(wp, 100_000, np.random.default_rng(2))
    assert stats.chisquare(np.bincount(ps.indices, minlength=5), 100_000 * w).pvalue > 1e-3


def test_resampling_edge_cases(rng):
    log_w = np.full(6, -np.inf)
    log_w[3] = 0.0
    ps = resample(normalise_log_weights(np.arange(6.0)[:, None], log_w), 500, rng)
    assert np.all(ps.draws == 3.0)
    ps = resample(normalise_log_weights(np.arange(6.0)[:, None], np.zeros(6)), 10_000, rng)
    assert ps.size == 10_000
    with pytest.raises(InvalidArgument):
        resample(normalise_log_weights(np.arange(6.0)[:, None], np.zeros(6)), 0, rng)


def test_two_point_kde_closed_form():
    kde = kde_fit(np.array([[-1.0], [1.0]]), bandwidths=np.array([1.0]))
    x = np.linspace(-3, 3, 13)
    assert np.allclose(kde(x), kde(-x))
    assert kde(np.array([0.0]))[0] == pytest.approx(math.exp(-0.5) / math.sqrt(2 * math.pi), rel=1e-12)
    assert kde(np.array([1.0]))[0] == pytest.approx(0.5 * (stats.norm.pdf(0) + stats.norm.pdf(2)), rel=1e-12)


def test_kde_non_negative_and_normalised(rng):
    pts = np.column_stack([rng.gamma(2.0, 0.5, 800), rng.normal(0.05, 0.01, 800)])
    kde = kde_fit(pts)
    assert np.all(kde(rng.uniform([-1, -0.1], [5, 0.2], (1000, 2))) >= 0)
    lo = pts.min(axis=0) - 6 * kde.bandwidths
    hi = pts.max(axis=0) + 6 * kde.bandwidths
    axes = [np.linspace(lo[k], hi[k], 400) for k in range(2)]
    mass = np.trapezoid(np.trapezoid(kde.on_grid(axes), axes[1], axis=1), axes[0])
    assert mass == pytest.approx(1.0, abs=0.01)
    one = kde_fit(pts[:, :1])
    mass1 = integrate.quad(lambda t: one(np.array([t]))[0], lo[0], hi[0], limit=200)[0]
    assert mass1 == pytest.approx(1.0, abs=0.01)


def test_kde_duplicate_merge_and_floor():
    x = np.array([[1.0], [1.0], [2.0], [4.0]])
    merged = kde_fit(x)
    assert merged.points.shape[0] == 3
    assert np.allclose(merged.weights, [0.5, 0.25, 0.25])
    const = kde_fit(np.full((10, 1), 2.0), prior_range=np.array([[0.0, 6.0]]))
    assert const.bandwidths[0] == pytest.approx(6e-3) and const.floored == (True,)


def test_summaries():
    s = summarize(np.array([[1.0], [2.0], [3.0]]))[0]
    assert s.median == 2.0 and s.mean == 2.0
    grid = np.linspace(-8, 8, 4001)
    q = grid_quantiles(grid, stats.norm.pdf(grid), [0.025, 0.5, 0.975])
    assert np.allclose(q, stats.norm.ppf([0.025, 0.5, 0.975]), atol=1e-4)


def test_exact_posterior_normalised_and_against_quadrature():
    d = DesignPoint((1.4,))
    grid, dens = exact_death_posterior(np.array([30]), d, TruncatedNormalPrior())
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-6)
    prior = stats.truncnorm(-1.0, np.inf, loc=1.0, scale=1.0)
    lik = lambda b: stats.binom.pmf(30, 50, -math.expm1(-1.4 * b)) * prior.pdf(b)
    z = integrate.quad(lik, 0, 6)[0]
    mean = integrate.quad(lambda b: b * lik(b), 0, 6)[0] / z
    assert np.trapezoid(grid * dens, grid) == pytest.approx(mean, abs=1e-3)


def test_uninformative_observation_leaves_prior():
    # a first measurement after one short step almost surely sees no infections
    cfg = DeathConfig(dt=0.001)
    prior = TruncatedNormalPrior()
    grid, dens = exact_death_posterior(np.array([0]), DesignPoint((0.001,)), prior, cfg)
    prior_dens = trapezoid_normalise(grid, prior.pdf(grid))
    assert 0.5 * np.trapezoid(np.abs(dens - prior_dens), grid) < 0.05


def test_exact_posterior_rejects_impossible_data():
    with pytest.raises(DegenerateWeights):
        exact_death_posterior(np.array([40, 10]), DesignPoint((1.0, 2.0)), TruncatedNormalPrior())


def test_default_grid():
    g = default_death_grid()
    assert g.size == 512 and g[0] > 0 and g[-1] == 6.0
