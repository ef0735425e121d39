"""Expected utility (mutual information) of a design.

The LFIRE estimator averages log r(d, y_i, theta_i) over a fixed bank of prior
draws theta_i with y_i simulated at theta_i.  For the Death model the exact
log-likelihood gives an oracle estimator whose marginal p(y | d) is computed
by quadrature over the prior.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (DesignPoint, InvalidArgument, PriorBank, PriorSpec, TruncatedNormalPrior,
                   sample_prior, substream)
from .lfire import (FeatureKind, MarginalDataset, RatioModel, Regularization, Simulator,
                    fit_ratio, sample_marginal)
from .simulators import DeathConfig, death_log_likelihood_grid, simulate_death

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LfireConfig:
    """Per-design LFIRE settings: M simulations per class, features, penalty, clipping."""

    M: int = 1000
    kind: FeatureKind = "standardized-poly2"
    reg: Regularization = Regularization()
    clip: float = 30.0


@dataclass(frozen=True)
class UtilityEstimate:
    design: DesignPoint
    value: float
    std_error: float
    n_samples: int
    clip_count: int = 0
    unconverged: int = 0
    log_ratios: np.ndarray = field(default=None, repr=False)
    error: str | None = None

    @classmethod
    def from_log_ratios(cls, design: DesignPoint, log_ratios: np.ndarray, clip_count: int = 0,
                        unconverged: int = 0) -> "UtilityEstimate":
        lr = np.asarray(log_ratios, dtype=float)
        se = float(lr.std(ddof=1) / math.sqrt(lr.size)) if lr.size > 1 else 0.0
        return cls(design, float(lr.mean()), se, int(lr.size), clip_count, unconverged, lr)

    @classmethod
    def failed(cls, design: DesignPoint, error: str) -> "UtilityEstimate":
        return cls(design, float("nan"), float("nan"), 0, error=error)

    @property
    def ok(self) -> bool:
        return self.error is None and math.isfinite(self.value)


@dataclass
class UtilityObjective:
    """Everything needed to evaluate U(d) reproducibly.

    The prior bank is drawn once from ``substream(seed, "prior-bank")`` and
    reused by every design evaluation.
    """

    model: Simulator
    prior: PriorSpec
    n_prior: int = 1000
    lfire: LfireConfig = LfireConfig()
    seed: int = 0
    workers: int = 1
    bank: PriorBank | None = None

    def __post_init__(self):
        if self.bank is None:
            self.bank = PriorBank(sample_prior(self.prior, self.n_prior, substream(self.seed, "prior-bank")))
        if self.bank.size < 1:
            raise InvalidArgument("prior bank must be non-empty")

    @property
    def thetas(self) -> np.ndarray:
        return self.bank.draws


@dataclass(frozen=True)
class RatioSet:
    """The N ratio models fitted at one design plus the data used to evaluate them."""

    design: DesignPoint
    models: list[RatioModel] = field(repr=False)
    observations: np.ndarray = field(repr=False)
    marginal: MarginalDataset = field(repr=False)


def fit_ratios(objective: UtilityObjective, design: DesignPoint, stream: int = 0) -> RatioSet:
    """Fit one LFIRE ratio per prior draw at ``design``.

    Sample i uses ``substream(seed, "mi", stream, i)``: first y_i ~ p(y | theta_i, d)
    is drawn, then the M positive-class
    simulations.  The marginal dataset is shared by all fits.
    """
    cfg = objective.lfire
    marginal = sample_marginal(design, objective.prior, objective.model, cfg.M,
                               substream(objective.seed, "marginal", stream))
    thetas = objective.thetas

    def one(i):
        rng = substream(objective.seed, "mi", stream, i)
        y = objective.model.simulate(thetas[i], design, 1, rng)[0]
        return y, fit_ratio(design, thetas[i], objective.model, marginal, cfg.M, cfg.reg, rng, cfg.kind)

    if objective.workers > 1:
        with ThreadPoolExecutor(objective.workers) as pool:
            results = list(pool.map(one, range(len(thetas))))
    else:
        results = [one(i) for i in range(len(thetas))]
    ys = np.asarray([r[0] for r in results])
    return RatioSet(design, [r[1] for r in results], ys, marginal)


def estimate_from_ratios(ratios: RatioSet, clip: float = 30.0) -> UtilityEstimate:
    raw = np.array([m.log_ratio(y)[0] for m, y in zip(ratios.models, ratios.observations)])
    raw = np.where(np.isnan(raw), -np.inf, raw)
    clipped = np.clip(raw, -clip, clip)
    clip_count = int(np.sum(clipped != raw))
    unconverged = sum(not m.converged for m in ratios.models)
    if unconverged:
        log.info("%d of %d ratio fits did not converge at %s", unconverged, len(raw), ratios.design)
    return UtilityEstimate.from_log_ratios(ratios.design, clipped, clip_count, unconverged)


def estimate_mi(objective: UtilityObjective, design: DesignPoint, stream: int = 0) -> UtilityEstimate:
    """Monte-Carlo LFIRE estimate of the mutual information at ``design``."""
    return estimate_from_ratios(fit_ratios(objective, design, stream), objective.lfire.clip)


@dataclass(frozen=True)
class Quadrature:
    """Gauss-Legendre nodes over (lower, upper] for marginalising the Death rate."""

    nodes: int = 256
    lower: float = 0.0
    upper: float = 6.0

    def rule(self, prior: PriorSpec) -> tuple[np.ndarray, np.ndarray]:
        if self.nodes < 8:
            raise InvalidArgument(f"quadrature needs at least 8 nodes, got {self.nodes}")
        lo, hi = self.lower, self.upper
        if isinstance(prior, TruncatedNormalPrior):
            # keep the nodes where the prior has mass, so narrow priors stay resolved
            sd = math.sqrt(prior.variance)
            lo = max(lo, prior.lower_bound, prior.mean - 12 * sd)
            hi = min(hi, prior.mean + 12 * sd)
        x, w = np.polynomial.legendre.leggauss(self.nodes)
        b = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        weights = 0.5 * (hi - lo) * w * prior.pdf(b)
        if not np.sum(weights) > 0:
            raise InvalidArgument("prior has no mass on the quadrature interval")
        return b, weights / np.sum(weights)


def log_marginal_death(outcomes: np.ndarray, design: DesignPoint, cfg: DeathConfig,
                       prior: PriorSpec, quad: Quadrature = Quadrature()) -> np.ndarray:
    """log p(y | d) for each row of ``outcomes`` by prior-weighted quadrature."""
    b, w = quad.rule(prior)
    ll = death_log_likelihood_grid(b, design, outcomes, cfg)
    with np.errstate(divide="ignore"):
        return logsumexp(ll + np.log(w)[None, :], axis=1)


def analytic_mi_death(bank: PriorBank | np.ndarray, design: DesignPoint, cfg: DeathConfig,
                      prior: PriorSpec, rng: np.random.Generator,
                      quad: Quadrature = Quadrature()) -> UtilityEstimate:
    """Oracle MI for the Death model using the closed-form likelihood.

    Monte-Carlo over the bank with y_i ~ p(y | b_i, d); the log-ratio is
    log p(y_i | b_i) - log p(y_i) with the marginal computed by quadrature.
    """
    draws = bank.draws if isinstance(bank, PriorBank) else np.asarray(bank, dtype=float).reshape(-1, 1)
    b = draws[:, 0]
    ys = np.array([simulate_death(bi, design, cfg, rng) for bi in b])
    uniq, inverse = np.unique(ys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    log_marg = log_marginal_death(uniq, design, cfg, prior, quad)
    ll = np.empty(b.size)
    # likelihood of each sample under its own parameter
    for row in range(len(uniq)):
        idx = np.flatnonzero(inverse == row)
        ll[idx] = death_log_likelihood_grid(b[idx], design, uniq[row:row + 1], cfg)[0]
    return UtilityEstimate.from_log_ratios(design, ll - log_marg[inverse])


def evaluate_on_grid(objective: UtilityObjective, grid: Sequence[DesignPoint],
                     estimator: str = "lfire", stream: int = 0) -> list[UtilityEstimate]:
    """Independent utility estimates at every grid point; failures are recorded, not raised."""
    if not grid:
        raise InvalidArgument("grid must be non-empty")
    out = []
    for design in grid:
        try:
            out.append(evaluate(objective, design, estimator, stream))
        except Exception as exc:  # keep sweeping; the failure is kept in the curve
            log.warning("utility evaluation failed at %s: %s", design, exc)
            out.append(UtilityEstimate.failed(design, f"{type(exc).__name__}: {exc}"))
    return out


def evaluate(objective: UtilityObjective, design: DesignPoint, estimator: str = "lfire",
             stream: int = 0) -> UtilityEstimate:
    if estimator == "lfire":
        return estimate_mi(objective, design, stream)
    if estimator == "analytic":
        cfg = getattr(objective.model, "cfg", None)
        if not isinstance(cfg, DeathConfig):
            raise InvalidArgument("the analytic estimator is only available for the Death model")
        rng = substream(objective.seed, "analytic", stream)
        return analytic_mi_death(objective.bank, design, cfg, objective.prior, rng)
    raise InvalidArgument(f"unknown estimator {estimator!r}")


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_curve_csv(path: str | Path, estimates: Iterable[UtilityEstimate]) -> None:
    estimates = list(estimates)
    dim = max(e.design.dim for e in estimates)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"tau_{k + 1}" for k in range(dim)] + ["value", "std_error", "clip_count"])
        for e in estimates:
            w.writerow([fmt(t) for t in e.design.times] + [fmt(e.value), fmt(e.std_error), e.clip_count])


def read_curve_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (designs, values, std_errors)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    dim = sum(h.startswith("tau_") for h in header)
    data = np.array([[float(x) for x in r] for r in body]).reshape(len(body), len(header))
    return data[:, :dim], data[:, dim], data[:, dim + 1]
