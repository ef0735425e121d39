"""Posterior inference at a chosen design from ratio-weighted prior draws.

Each prior draw is weighted by its estimated ratio r(d*, y*, theta_i), the
weights are normalised, and the draws are resampled with replacement.  The
resampled set is smoothed with a product Gaussian KDE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .core import DesignPoint, InvalidArgument, PriorSpec
from .lfire import RatioModel
from .simulators import DeathConfig, death_log_likelihood_grid


class DegenerateWeights(RuntimeError):
    """No prior draw carries weight: the observation is incompatible with the bank."""


@dataclass(frozen=True)
class WeightedPrior:
    draws: np.ndarray = field(repr=False)
    log_weights: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))


def normalise_log_weights(draws: np.ndarray, log_w: np.ndarray) -> WeightedPrior:
    log_w = np.asarray(log_w, dtype=float)
    finite = np.isfinite(log_w)
    if not finite.any():
        raise DegenerateWeights("every weight is zero")
    top = np.max(log_w[finite])
    w = np.where(finite, np.exp(log_w - top), 0.0)
    return WeightedPrior(np.asarray(draws), log_w, w / w.sum())


def compute_weights(models: Sequence[RatioModel], y_star: np.ndarray, bank: np.ndarray,
                    clip: float = 30.0) -> WeightedPrior:
    """w_i = exp(clip(log r_i(y*))), one ratio model per prior draw."""
    if len(models) != len(bank):
        raise InvalidArgument("need exactly one ratio model per prior draw")
    y_star = np.asarray(y_star, dtype=float).reshape(1, -1)
    log_w = np.array([m.log_ratio(y_star)[0] for m in models])
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    return normalise_log_weights(bank, np.clip(log_w, -clip, clip))


def likelihood_weights(y_star: np.ndarray, design: DesignPoint, bank: np.ndarray,
                       cfg: DeathConfig) -> WeightedPrior:
    """Exact self-normalised importance weights p(y* | b_i) for the Death model."""
    log_w = death_log_likelihood_grid(np.asarray(bank)[:, 0], design, np.asarray(y_star).reshape(1, -1), cfg)[0]
    return normalise_log_weights(bank, log_w)


@dataclass(frozen=True)
class PosteriorSamples:
    draws: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    design: DesignPoint | None = None
    observation: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.draws.shape[0]


def resample(wp: WeightedPrior, count: int, rng: np.random.Generator,
             design: DesignPoint | None = None, observation: np.ndarray | None = None) -> PosteriorSamples:
    """Multinomial resampling: ``count`` i.i.d. draws from cat(W)."""
    if count < 1:
        raise InvalidArgument(f"count must be positive, got {count}")
    idx = rng.choice(len(wp.weights), size=count, replace=True, p=wp.weights)
    draws = np.asarray(wp.draws).reshape(len(wp.weights), -1)[idx]
    return PosteriorSamples(draws, idx, design, observation)


def silverman_bandwidth(x: np.ndarray) -> np.ndarray:
    """Per-dimension rule-of-thumb bandwidths (4 / (d + 2))^(1/(d+4)) sd n^(-1/(d+4))."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    return (4.0 / (d + 2)) ** (1.0 / (d + 4)) * x.std(axis=0, ddof=1) * n ** (-1.0 / (d + 4))


@dataclass(frozen=True)
class KdeDensity:
    """Product Gaussian KDE over (weighted) support points."""

    points: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    bandwidths: np.ndarray
    floored: tuple[bool, ...] = ()

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1, self.dim)
        out = np.ones((theta.shape[0], self.points.shape[0]))
        for k in range(self.dim):
            out *= stats.norm.pdf(theta[:, k, None], self.points[None, :, k], self.bandwidths[k])
        return out @ self.weights

    def marginal_on_axis(self, k: int, axis: np.ndarray) -> np.ndarray:
        kern = stats.norm.pdf(np.asarray(axis)[:, None], self.points[None, :, k], self.bandwidths[k])
        return kern @ self.weights

    def on_grid(self, axes: Sequence[np.ndarray]) -> np.ndarray:
        """Density on the tensor grid spanned by ``axes`` (one array per dimension)."""
        kerns = [stats.norm.pdf(np.asarray(a)[:, None], self.points[None, :, k], self.bandwidths[k])
                 for k, a in enumerate(axes)]
        if self.dim == 1:
            return kerns[0] @ self.weights
        if self.dim == 2:
            return (kerns[0] * self.weights) @ kerns[1].T
        raise InvalidArgument("grid evaluation is implemented for 1-D and 2-D densities")


def kde_fit(samples: PosteriorSamples | np.ndarray, bandwidths: np.ndarray | None = None,
            prior_range: np.ndarray | None = None) -> KdeDensity:
    """Gaussian KDE with Silverman bandwidths computed on the resampled set.

    A zero-variance dimension gets bandwidth 1e-3 of its prior range (or 1e-3
    when no range is given) and is flagged.  Repeated draws are merged into
    weighted support points, which leaves the density unchanged.
    """
    x = samples.draws if isinstance(samples, PosteriorSamples) else np.asarray(samples, dtype=float)
    x = x.reshape(x.shape[0], -1)
    if x.shape[0] < 2:
        raise InvalidArgument("a KDE needs at least 2 samples")
    h = silverman_bandwidth(x) if bandwidths is None else np.asarray(bandwidths, dtype=float).reshape(-1)
    if prior_range is None:
        floor = np.full(x.shape[1], 1e-3)
    else:
        pr = np.asarray(prior_range, dtype=float).reshape(-1, 2)
        floor = 1e-3 * (pr[:, 1] - pr[:, 0])
    floored = tuple(bool(f) for f in ~(h > 0))
    h = np.where(h > 0, h, floor)
    pts, counts = np.unique(x, axis=0, return_counts=True)
    return KdeDensity(pts, counts / counts.sum(), h, floored)


@dataclass(frozen=True)
class Summary:
    median: float
    lower: float
    upper: float
    mean: float

    def to_dict(self) -> dict:
        return {"median": self.median, "ci_lower": self.lower, "ci_upper": self.upper, "mean": self.mean}


def summarize(samples: PosteriorSamples | np.ndarray, level: float = 0.95) -> list[Summary]:
    """Per-dimension median, central credible interval and mean (linear-interpolated quantiles)."""
    x = samples.draws if isinstance(samples, PosteriorSamples) else np.asarray(samples, dtype=float)
    x = x.reshape(x.shape[0], -1)
    if x.shape[0] == 0:
        raise InvalidArgument("cannot summarise an empty sample")
    a = (1.0 - level) / 2.0
    q = np.quantile(x, [0.5, a, 1.0 - a], axis=0)
    return [Summary(float(q[0, k]), float(q[1, k]), float(q[2, k]), float(x[:, k].mean()))
            for k in range(x.shape[1])]


def default_death_grid(points: int = 512, upper: float = 6.0) -> np.ndarray:
    return np.linspace(0.0, upper, points + 1)[1:]


def trapezoid_normalise(grid: np.ndarray, density: np.ndarray) -> np.ndarray:
    mass = np.trapezoid(density, grid)
    if not mass > 0:
        raise DegenerateWeights("density vanishes on the grid")
    return density / mass


def exact_death_posterior(y_star: np.ndarray, design: DesignPoint, prior: PriorSpec,
                          cfg: DeathConfig | None = None,
                          grid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Posterior of b by Bayes' rule on a grid, trapezoid-normalised."""
    cfg = cfg or DeathConfig()
    grid = default_death_grid() if grid is None else np.asarray(grid, dtype=float)
    ll = death_log_likelihood_grid(grid, design, np.asarray(y_star).reshape(1, -1), cfg)[0]
    with np.errstate(divide="ignore"):
        log_post = ll + np.log(prior.pdf(grid))
    if not np.isfinite(log_post).any():
        raise DegenerateWeights("observation has zero likelihood everywhere on the grid")
    dens = np.exp(log_post - np.max(log_post[np.isfinite(log_post)]))
    return grid, trapezoid_normalise(grid, np.where(np.isfinite(log_post), dens, 0.0))


def grid_quantiles(grid: np.ndarray, density: np.ndarray, probs: Sequence[float]) -> np.ndarray:
    """Quantiles of a density tabulated on a grid (cumulative trapezoid, linear inverse)."""
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    return np.interp(probs, cdf, grid)


def grid_summary(grid: np.ndarray, density: np.ndarray, level: float = 0.95) -> Summary:
    a = (1.0 - level) / 2.0
    med, lo, hi = grid_quantiles(grid, density, [0.5, a, 1.0 - a])
    mean = np.trapezoid(grid * density, grid) / np.trapezoid(density, grid)
    return Summary(float(med), float(lo), float(hi), float(mean))


def grid_sd(grid: np.ndarray, density: np.ndarray) -> float:
    mass = np.trapezoid(density, grid)
    mean = np.trapezoid(grid * density, grid) / mass
    return math.sqrt(np.trapezoid((grid - mean) ** 2 * density, grid) / mass)


def average_densities(densities: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and standard deviation of replicate densities on a common grid."""
    stack = np.asarray(densities, dtype=float)
    if stack.ndim < 2 or stack.shape[0] == 0:
        raise InvalidArgument("need at least one density")
    return stack.mean(axis=0), stack.std(axis=0)
