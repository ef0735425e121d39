"""Stochastic epidemic simulators (Death, SIR) and the Death model likelihood.

Both models are discrete-time binomial chains with step ``dt``.  A
measurement time tau is mapped to ``round(tau / dt)`` steps (at least one).

The Death chain has a constant per-step infection probability, so advancing
``k`` steps at once is exactly ``Bin(S, 1 - exp(-b k dt))``; the simulator
jumps between measurement steps instead of stepping, which gives the same
law as the step-by-step chain at a fraction of the cost.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import stats

from .core import DesignPoint, InvalidArgument

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeathConfig:
    population: int = 50
    dt: float = 0.01
    initial_infected: int = 0

    def __post_init__(self):
        if self.population < 1:
            raise InvalidArgument(f"population must be positive, got {self.population}")
        if self.dt <= 0:
            raise InvalidArgument(f"dt must be positive, got {self.dt}")
        if not 0 <= self.initial_infected <= self.population:
            raise InvalidArgument("initial_infected must lie in [0, population]")


@dataclass(frozen=True)
class SIRConfig:
    """Population N; the chain starts from (S, I, R) = (N - 1, 1, 0)."""

    population: int = 50
    dt: float = 0.01

    def __post_init__(self):
        if self.population < 2:
            raise InvalidArgument(f"SIR population must be at least 2, got {self.population}")
        if self.dt <= 0:
            raise InvalidArgument(f"dt must be positive, got {self.dt}")

    @property
    def initial_state(self) -> tuple[int, int, int]:
        return self.population - 1, 1, 0


def design_steps(design: DesignPoint, dt: float) -> np.ndarray:
    """Number of chain steps reaching each measurement time."""
    times = design.as_array()
    if np.any(times <= 0):
        raise InvalidArgument(f"measurement times must be positive, got {design.times}")
    steps = np.maximum(np.rint(times / dt), 1).astype(np.int64)
    offset = np.max(np.abs(steps * dt - times))
    if offset > 1e-9 * max(1.0, float(times[-1])):
        log.debug("design %s snapped to the dt grid (max offset %.3g)", design, offset)
    return steps


def death_infection_prob(b: float, t: float) -> float:
    """Probability 1 - exp(-b t) that a susceptible is infected within time t."""
    if b < 0 or t < 0:
        raise InvalidArgument(f"rate and duration must be non-negative, got b={b}, t={t}")
    return -math.expm1(-b * t)


def simulate_death(b: float, design: DesignPoint, cfg: DeathConfig,
                   rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Infected counts [I(tau_1), ..., I(tau_n)]; shape (n,) or (size, n)."""
    if b < 0:
        raise InvalidArgument(f"infection rate must be non-negative, got {b}")
    steps = design_steps(design, cfg.dt)
    shape = (1 if size is None else int(size),)
    infected = np.full(shape, cfg.initial_infected, dtype=np.int64)
    out = np.empty(shape + (steps.size,), dtype=np.int64)
    prev = 0
    for k, step in enumerate(steps):
        p = death_infection_prob(b, (step - prev) * cfg.dt)
        infected = infected + rng.binomial(cfg.population - infected, p)
        out[:, k] = infected
        prev = step
    return out[0] if size is None else out


@numba.njit(cache=True, nogil=True)
def _sir_kernel(beta, gamma, population, record_steps, size, rng):
    n = record_steps.shape[0]
    out = np.empty((size, 3 * n), dtype=np.int64)
    last = record_steps[n - 1]
    for m in range(size):
        s = population - 1
        i = 1
        r = 0
        k = 0
        step = 0
        while k < n:
            while k < n and record_steps[k] == step:
                out[m, 3 * k] = s
                out[m, 3 * k + 1] = i
                out[m, 3 * k + 2] = r
                k += 1
            if k == n or step == last:
                break
            if i == 0:
                # absorbed: the state no longer changes
                while k < n:
                    out[m, 3 * k] = s
                    out[m, 3 * k + 1] = 0
                    out[m, 3 * k + 2] = r
                    k += 1
                break
            d_inf = rng.binomial(s, beta * i / population) if s > 0 else 0
            d_rec = rng.binomial(i, gamma)
            s -= d_inf
            i += d_inf - d_rec
            r += d_rec
            step += 1
    return out


def simulate_sir(beta: float, gamma: float, design: DesignPoint, cfg: SIRConfig,
                 rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Recorded states [S(tau_1), I(tau_1), R(tau_1), ...]; shape (3n,) or (size, 3n)."""
    if not (0.0 <= beta <= 1.0 and 0.0 <= gamma <= 1.0):
        raise InvalidArgument(f"beta and gamma must lie in [0, 1], got ({beta}, {gamma})")
    steps = design_steps(design, cfg.dt)
    out = _sir_kernel(float(beta), float(gamma), int(cfg.population), steps,
                      1 if size is None else int(size), rng)
    return out[0] if size is None else out


def death_log_likelihood(b: float, design: DesignPoint, outcome: np.ndarray,
                         cfg: DeathConfig) -> float:
    """log prod_k Bin(S(tau_k); S(tau_{k-1}), exp(-b (tau_k - tau_{k-1}))).

    Inconsistent outcomes (infections decreasing or exceeding N) give -inf.
    """
    return float(death_log_likelihood_grid(np.array([b]), design,
                                           np.asarray(outcome).reshape(1, -1), cfg)[0, 0])


def death_log_likelihood_grid(b: np.ndarray, design: DesignPoint, outcomes: np.ndarray,
                              cfg: DeathConfig) -> np.ndarray:
    """Log-likelihood matrix, shape (len(outcomes), len(b))."""
    b = np.asarray(b, dtype=float).reshape(-1)
    outcomes = np.asarray(outcomes).reshape(-1, design.dim)
    gaps = np.diff(design.as_array(), prepend=0.0)
    susceptible = cfg.population - outcomes
    prev = np.column_stack([np.full(len(outcomes), cfg.population - cfg.initial_infected),
                            susceptible[:, :-1]])
    total = np.zeros((len(outcomes), b.size))
    with np.errstate(divide="ignore"):
        for k, gap in enumerate(gaps):
            survive = np.exp(-b * gap)
            total += stats.binom.logpmf(susceptible[:, k, None], prev[:, k, None], survive[None, :])
    bad = np.any(susceptible > prev, axis=1) | np.any(susceptible < 0, axis=1)
    total[bad] = -np.inf
    return np.where(np.isnan(total), -np.inf, total)


class DeathModel:
    """Simulator handle for the Death model; theta = [b]."""

    name = "death"
    param_names = ("b",)

    def __init__(self, cfg: DeathConfig | None = None):
        self.cfg = cfg or DeathConfig()

    def outcome_dim(self, design: DesignPoint) -> int:
        return design.dim

    def simulate(self, theta, design: DesignPoint, size: int, rng: np.random.Generator) -> np.ndarray:
        return simulate_death(float(np.ravel(theta)[0]), design, self.cfg, rng, size)


class SIRModel:
    """Simulator handle for the SIR model; theta = [beta, gamma]."""

    name = "sir"
    param_names = ("beta", "gamma")

    def __init__(self, cfg: SIRConfig | None = None):
        self.cfg = cfg or SIRConfig()

    def outcome_dim(self, design: DesignPoint) -> int:
        return 3 * design.dim

    def simulate(self, theta, design: DesignPoint, size: int, rng: np.random.Generator) -> np.ndarray:
        beta, gamma = np.ravel(theta)[:2]
        return simulate_sir(float(beta), float(gamma), design, self.cfg, rng, size)
