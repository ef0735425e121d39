import math

import numpy as np
import pytest
from scipy import optimize
from scipy.special import log_expit

from implicit_design.core import DesignPoint, InvalidArgument, TruncatedNormalPrior, UniformBoxPrior
from implicit_design.lfire import (FeatureMap, RatioModel, Regularization, fit_feature_map, fit_logistic, fit_ratio,
                                   fit_ratio_from_data, identity_ratio, log_ratio, sample_marginal)
from implicit_design.simulators import DeathModel, SIRModel


class PointMassPrior:
    param_dim = 1

    def __init__(self, value):
        self.value = value

    def sample(self, count, rng):
        return np.full((count, 1), self.value)


def _gaussian_ratio(m_pos, m_neg, seed, kind="standardized-poly2"):
    rng = np.random.default_rng(seed)
    pos = rng.normal(1.0, 1.0, (m_pos, 1))
    neg = rng.normal(0.0, 1.0, (m_neg, 1))
    return fit_ratio_from_data(pos, neg, kind, Regularization(), rng)


def test_marginal_dataset_sizes(rng):
    d = DesignPoint((1.0,))
    model = DeathModel()
    assert sample_marginal(d, TruncatedNormalPrior(), model, 1000, rng).outcomes.shape == (1000, 1)
    assert sample_marginal(d, TruncatedNormalPrior(), model, 2, rng).size == 2
    with pytest.raises(InvalidArgument):
        sample_marginal(d, TruncatedNormalPrior(), model, 1, rng)
    zero = sample_marginal(DesignPoint((0.5, 2.0)), PointMassPrior(0.0), model, 50, rng)
    assert np.all(zero.outcomes == 0)


def test_feature_map_constant_data():
    x = np.full((20, 3), 4.0)
    fmap = fit_feature_map(x, x)
    assert fmap.constant.all()
    assert not fmap.active.any()


def test_feature_map_statistics_two_pass(rng):
    a = rng.normal(3.0, 2.0, (300, 2))
    b = rng.normal(-1.0, 0.5, (200, 2))
    fmap = fit_feature_map(a, b, "raw")
    pooled = np.vstack([a, b])
    n = len(pooled)
    mean = [sum(pooled[:, k]) / n for k in range(2)]
    var = [sum((pooled[:, k] - mean[k]) ** 2) / n for k in range(2)]
    assert np.allclose(fmap.raw_mean, mean, rtol=1e-12)
    assert np.allclose(fmap.raw_scale, np.sqrt(var), rtol=1e-12)


def test_feature_map_output_dim_and_round_trip(rng):
    x = rng.normal(size=(50, 3))
    fmap = fit_feature_map(x, x + 1)
    assert fmap.output_dim == 9
    assert fmap.transform(x).shape == (50, 9)
    again = FeatureMap.from_dict(fmap.to_dict())
    assert np.array_equal(again.transform(x), fmap.transform(x))


def test_identity_ratio_is_zero(rng):
    model = identity_ratio(4, "standardized-poly2")
    assert np.all(model.log_ratio(rng.normal(size=(10, 4))) == 0.0)
    assert log_ratio(identity_ratio(2), np.array([3.0, -1.0])) == 0.0
    with pytest.raises(InvalidArgument):
        log_ratio(model, np.zeros(3))


def test_raw_log_ratio_is_affine(rng):
    pos = rng.normal(1.0, 1.0, (500, 2))
    neg = rng.normal(0.0, 1.0, (500, 2))
    model = fit_ratio_from_data(pos, neg, "raw")
    a, b = np.array([0.0, 1.0]), np.array([2.0, -1.0])
    pts = np.array([a, 0.5 * (a + b), b])
    r = model.log_ratio(pts)
    assert r[1] == pytest.approx(0.5 * (r[0] + r[2]), abs=1e-12)


def test_gaussian_synthetic_ratio():
    model = _gaussian_ratio(10_000, 10_000, 0)
    y = np.linspace(-2, 3, 201)[:, None]
    rmse = np.sqrt(np.mean((model.log_ratio(y) - (y[:, 0] - 0.5)) ** 2))
    assert rmse < 0.1
    assert log_ratio(model, np.array([1.0])) == pytest.approx(0.5, abs=0.1)
    assert model.converged


def test_unbalanced_classes_offset_removed():
    model = _gaussian_ratio(20_000, 5_000, 1)
    y = np.linspace(-2, 3, 201)[:, None]
    assert np.sqrt(np.mean((model.log_ratio(y) - (y[:, 0] - 0.5)) ** 2)) < 0.1


def test_same_distribution_gives_zero_ratio():
    # the true ratio is 1; average held-out log-ratios over independent fits
    means = []
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        model = fit_ratio_from_data(rng.normal(size=(1000, 2)), rng.normal(size=(1000, 2)))
        means.append(model.log_ratio(rng.normal(size=(5000, 2))).mean())
    means = np.array(means)
    assert abs(means.mean()) < 3 * means.std(ddof=1) / math.sqrt(means.size)


def test_penalty_shrinks_coefficients(rng):
    X = rng.normal(size=(400, 3))
    y = (X @ np.array([1.0, -2.0, 0.5]) + rng.logistic(size=400) > 0).astype(float)
    norms = [np.linalg.norm(fit_logistic(X, y, lam).coef) for lam in (0.01, 1.0, 10.0, 100.0)]
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_newton_matches_generic_optimiser(rng):
    X = rng.normal(size=(300, 4))
    y = (X @ np.array([0.5, -1.0, 0.0, 2.0]) + 0.3 + rng.logistic(size=300) > 0).astype(float)
    lam = 0.5

    def obj(w):
        z = w[0] + X @ w[1:]
        return -np.sum(y * log_expit(z) + (1 - y) * log_expit(-z)) + 0.5 * lam * w[1:] @ w[1:]

    ref = optimize.minimize(obj, np.zeros(5), method="BFGS", options={"gtol": 1e-10}).x
    fit = fit_logistic(X, y, lam)
    assert fit.converged
    assert np.allclose(np.r_[fit.intercept, fit.coef], ref, atol=1e-5)


def test_fit_is_deterministic():
    a = _gaussian_ratio(500, 500, 3)
    b = _gaussian_ratio(500, 500, 3)
    assert a.intercept == b.intercept and np.array_equal(a.coefficients, b.coefficients)
    again = RatioModel.from_dict(a.to_dict())
    y = np.linspace(-1, 1, 5)[:, None]
    assert np.array_equal(again.log_ratio(y), a.log_ratio(y))


def test_redundant_sir_columns_are_inactive():
    # R = N - S - I makes the third raw column an affine copy of the first two
    model = SIRModel()
    d = DesignPoint((0.4,))
    rng = np.random.default_rng(4)
    marginal = sample_marginal(d, UniformBoxPrior(), model, 300, rng)
    ratio = fit_ratio(d, np.array([0.15, 0.05]), model, marginal, 300, Regularization(), rng)
    assert ratio.converged
    assert not ratio.feature_map.active[2]
    assert np.all(ratio.coefficients[~ratio.feature_map.active] == 0)


def test_fit_ratio_argument_checks(rng):
    d = DesignPoint((1.0,))
    marginal = sample_marginal(d, TruncatedNormalPrior(), DeathModel(), 10, rng)
    with pytest.raises(InvalidArgument):
        fit_ratio(DesignPoint((2.0,)), np.array([1.0]), DeathModel(), marginal, 10, rng=rng)
    with pytest.raises(InvalidArgument):
        fit_ratio(d, np.array([1.0]), DeathModel(), marginal, 10, rng=None)


def test_cross_validated_penalty_runs(rng):
    pos = rng.normal(1.0, 1.0, (300, 1))
    neg = rng.normal(0.0, 1.0, (300, 1))
    model = fit_ratio_from_data(pos, neg, reg=Regularization(cv_folds=3), rng=rng)
    assert log_ratio(model, np.array([1.0])) == pytest.approx(0.5, abs=0.3)
