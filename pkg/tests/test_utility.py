import math

import numpy as np
import pytest
from scipy import integrate, stats

from implicit_design.core import DesignPoint, InvalidArgument, PriorBank, TruncatedNormalPrior, UniformBoxPrior
from implicit_design.lfire import identity_ratio
from implicit_design.simulators import DeathConfig, DeathModel, SIRModel
from implicit_design.utility import (LfireConfig, Quadrature, RatioSet, UtilityObjective, analytic_mi_death,
                                     estimate_from_ratios, estimate_mi, evaluate, evaluate_on_grid,
                                     read_curve_csv, write_curve_csv)


class NoiseModel:
    """Simulator whose output ignores theta."""

    name = "noise"
    param_names = ("theta",)

    def outcome_dim(self, design):
        return 2

    def simulate(self, theta, design, size, rng):
        return rng.normal(size=(size, 2))


class FlakyDeath(DeathModel):
    def simulate(self, theta, design, size, rng):
        if design.times[0] > 2.0:
            raise RuntimeError("simulator crashed")
        return super().simulate(theta, design, size, rng)


def exact_death_mi(tau, n_pop=50, mean=1.0, var=1.0):
    """MI by enumerating every outcome and integrating over b with adaptive quadrature."""
    prior = stats.truncnorm(-mean / math.sqrt(var), np.inf, loc=mean, scale=math.sqrt(var))
    ys = np.arange(n_pop + 1)

    def pmf(b):
        return stats.binom.pmf(ys, n_pop, -math.expm1(-b * tau))

    hi = mean + 12 * math.sqrt(var)
    opts = dict(limit=200, epsabs=1e-12, epsrel=1e-10)
    marginal = np.array([integrate.quad(lambda b, k=k: prior.pdf(b) * pmf(b)[k], 0, hi, **opts)[0] for k in ys])

    def neg_entropy(b):
        p = pmf(b)
        p = p[p > 0]
        return prior.pdf(b) * np.sum(p * np.log(p))

    cond = integrate.quad(neg_entropy, 0, hi, **opts)[0]
    m = marginal[marginal > 0]
    return cond - np.sum(m * np.log(m))


def test_identity_ratios_give_exactly_zero(rng):
    d = DesignPoint((1.0,))
    models = [identity_ratio(1, "standardized-poly2") for _ in range(20)]
    ratios = RatioSet(d, models, rng.integers(0, 50, (20, 1)), None)
    est = estimate_from_ratios(ratios)
    assert est.value == 0.0 and est.std_error == 0.0 and est.clip_count == 0


def test_theta_independent_simulator_has_zero_mi():
    hits = 0
    for seed in range(20):
        obj = UtilityObjective(NoiseModel(), UniformBoxPrior((0.0,), (1.0,)), n_prior=100,
                               lfire=LfireConfig(M=100), seed=seed)
        est = estimate_mi(obj, DesignPoint((1.0,)))
        hits += abs(est.value) <= 3 * est.std_error
    assert hits >= 19


def test_lfire_death_mi_near_optimum():
    obj = UtilityObjective(DeathModel(), TruncatedNormalPrior(), n_prior=1000, lfire=LfireConfig(M=1000))
    est = estimate_mi(obj, DesignPoint((1.1,)))
    assert est.value == pytest.approx(1.35, abs=0.2)
    assert est.unconverged == 0


@pytest.mark.parametrize("tau", [0.01, 1.4, 3.0])
def test_analytic_estimator_matches_enumeration(tau):
    obj = UtilityObjective(DeathModel(), TruncatedNormalPrior(), n_prior=1000, seed=3)
    est = evaluate(obj, DesignPoint((tau,)), "analytic")
    assert abs(est.value - exact_death_mi(tau)) < 3 * est.std_error + 1e-3


def test_analytic_mi_vanishes_for_short_first_step():
    # with N = 50 a single 0.01 step still carries about 0.11 nats; the limit needs a finer step
    cfg = DeathConfig(dt=0.001)
    obj = UtilityObjective(DeathModel(cfg), TruncatedNormalPrior(), n_prior=1000, seed=3)
    est = evaluate(obj, DesignPoint((0.001,)), "analytic")
    exact = exact_death_mi(0.001)
    assert abs(est.value) < 0.05 and exact < 0.05
    assert abs(est.value - exact) < 3 * est.std_error + 1e-3
    assert exact_death_mi(0.01) > exact > exact_death_mi(0.0001)


def test_quadrature_marginal_matches_adaptive_quadrature():
    from implicit_design.utility import log_marginal_death
    d = DesignPoint((0.7,))
    ys = np.arange(51)[:, None]
    got = np.exp(log_marginal_death(ys, d, DeathConfig(), TruncatedNormalPrior()))
    prior = stats.truncnorm(-1.0, np.inf, loc=1.0, scale=1.0)
    # the marginal is defined with the prior restricted to (0, 6] and renormalised
    mass = prior.cdf(6.0)
    want = [integrate.quad(lambda b: prior.pdf(b) * stats.binom.pmf(k, 50, -math.expm1(-0.7 * b)), 0, 6,
                           epsabs=1e-13, limit=200)[0] / mass for k in range(51)]
    assert np.allclose(got, want, atol=1e-9)
    assert got.sum() == pytest.approx(1.0, abs=1e-9)


def test_analytic_death_mi_near_optimum():
    obj = UtilityObjective(DeathModel(), TruncatedNormalPrior(), n_prior=1000)
    assert evaluate(obj, DesignPoint((1.4,)), "analytic").value == pytest.approx(1.347, abs=0.15)


def test_point_mass_prior_has_zero_mi(rng):
    prior = TruncatedNormalPrior(1.0, 1e-12, 0.0)
    bank = PriorBank(np.full((200, 1), 1.0))
    est = analytic_mi_death(bank, DesignPoint((1.0,)), DeathConfig(), prior, rng)
    assert abs(est.value) < 1e-6
    with pytest.raises(InvalidArgument):
        Quadrature(nodes=4).rule(prior)


def test_estimator_argument_checks():
    obj = UtilityObjective(SIRModel(), UniformBoxPrior(), n_prior=5, lfire=LfireConfig(M=5))
    with pytest.raises(InvalidArgument):
        evaluate(obj, DesignPoint((1.0,)), "analytic")
    with pytest.raises(InvalidArgument):
        evaluate(obj, DesignPoint((1.0,)), "nested")


def test_estimates_are_reproducible_and_thread_safe():
    kw = dict(model=SIRModel(), prior=UniformBoxPrior(), n_prior=30, lfire=LfireConfig(M=50), seed=5)
    d = DesignPoint((0.3, 0.9))
    a = estimate_mi(UtilityObjective(**kw), d)
    b = estimate_mi(UtilityObjective(**kw, workers=3), d)
    assert np.array_equal(a.log_ratios, b.log_ratios)
    c = estimate_mi(UtilityObjective(**kw), d, stream=1)
    assert not np.array_equal(a.log_ratios, c.log_ratios)


def test_grid_evaluation_records_failures(tmp_path):
    obj = UtilityObjective(FlakyDeath(), TruncatedNormalPrior(), n_prior=50)
    grid = [DesignPoint((t,)) for t in (1.0, 2.5, 3.0)]
    obj.lfire = LfireConfig(M=20)
    curve = evaluate_on_grid(obj, grid, "lfire")
    assert [e.ok for e in curve] == [True, False, False]
    assert "crashed" in curve[1].error
    path = tmp_path / "curve.csv"
    write_curve_csv(path, curve)
    assert path.read_text().splitlines()[0] == "tau_1,value,std_error,clip_count"
    designs, values, se = read_curve_csv(path)
    assert values[0] == curve[0].value and np.isnan(values[1])
    assert designs[:, 0].tolist() == [1.0, 2.5, 3.0]
