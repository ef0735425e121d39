"""Design optimisation: 1-D grid search and GP Bayesian optimisation with EI.

BO works on the unit box; an increment-based transform maps box points to
strictly ordered measurement times, so the ordering constraint never has to
be enforced by rejection or penalties.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .core import DesignPoint, DesignSpace, InvalidArgument, make_grid, substream
from .gp import GPSurrogate, gp_fit, surrogate_ei
from .utility import UtilityEstimate, UtilityObjective, evaluate, evaluate_on_grid, fmt

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class OrderedSimplexTransform:
    """Bijection between (0, 1)^n and {lower < tau_1 < ... < tau_n < upper}.

    Coordinate k sets the next increment as a fraction of the remaining range,
    tau_k = tau_{k-1} + (upper - tau_{k-1}) (1 - (1 - u_k)^(1/(n-k+1))).
    These are the conditional laws of uniform order statistics, so a uniform
    box point maps to a uniform ordered design.
    """

    n: int
    lower: float
    upper: float

    @classmethod
    def for_space(cls, space: DesignSpace) -> "OrderedSimplexTransform":
        return cls(space.dim, space.lower, space.upper)

    def to_times(self, u: np.ndarray) -> np.ndarray:
        u = np.clip(np.asarray(u, dtype=float).reshape(self.n), 0.0, 1.0)
        v = np.empty(self.n)
        prev = 0.0
        for k in range(self.n):
            prev = 1.0 - (1.0 - prev) * (1.0 - u[k]) ** (1.0 / (self.n - k))
            v[k] = prev
        times = self.lower + (self.upper - self.lower) * v
        # floating-point ties at the box faces: separate them by single ulps,
        # upwards from the lower face, then downwards from the upper one
        times[0] = max(times[0], np.nextafter(self.lower, np.inf))
        for k in range(1, self.n):
            if times[k] <= times[k - 1]:
                times[k] = np.nextafter(times[k - 1], np.inf)
        times[-1] = min(times[-1], self.upper)
        for k in range(self.n - 2, -1, -1):
            if times[k] >= times[k + 1]:
                times[k] = np.nextafter(times[k + 1], -np.inf)
        return times

    def to_design(self, u: np.ndarray) -> DesignPoint:
        return DesignPoint(tuple(self.to_times(u)))

    def to_unit(self, design: DesignPoint | np.ndarray) -> np.ndarray:
        t = design.as_array() if isinstance(design, DesignPoint) else np.asarray(design, dtype=float)
        v = (t - self.lower) / (self.upper - self.lower)
        prev = np.r_[0.0, v[:-1]]
        m = self.n - np.arange(self.n)
        return 1.0 - ((1.0 - v) / (1.0 - prev)) ** m


def _golden_max(f: Callable[[float], float], a: float, b: float, iters: int = 20) -> tuple[float, float]:
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


@dataclass(frozen=True)
class Proposal:
    u: np.ndarray
    design: DesignPoint
    ei: float
    exploratory: bool = False


def maximise_ei(surrogate: GPSurrogate, transform: OrderedSimplexTransform, incumbent_best: float,
                rng: np.random.Generator, xi: float = 0.01, n_candidates: int = 1024,
                n_polish: int = 4, window: float = 0.1, sweeps: int = 2) -> Proposal:
    """Quasi-random search over the unit box, then coordinate-wise golden-section polish."""
    dim = transform.n
    sobol = qmc.Sobol(dim, scramble=True, seed=rng)
    cand = sobol.random_base2(int(round(math.log2(n_candidates))))
    ei = surrogate_ei(surrogate, cand, incumbent_best, xi)
    best_u, best_ei = cand[int(np.argmax(ei))], float(np.max(ei))
    for idx in np.argsort(-ei, kind="stable")[:n_polish]:
        u = cand[idx].copy()
        val = float(ei[idx])
        for _ in range(sweeps):
            for k in range(dim):
                def f(x, k=k, u=u):
                    trial = u.copy()
                    trial[k] = x
                    return float(surrogate_ei(surrogate, trial[None, :], incumbent_best, xi)[0])
                x, fx = _golden_max(f, max(0.0, u[k] - window), min(1.0, u[k] + window))
                if fx > val:
                    u[k], val = x, fx
        if val > best_ei:
            best_u, best_ei = u, val
    if not best_ei > 0.0:
        u = rng.random(dim)
        return Proposal(u, transform.to_design(u), 0.0, exploratory=True)
    return Proposal(best_u, transform.to_design(best_u), best_ei)


def propose_next(surrogate: GPSurrogate, transform: OrderedSimplexTransform,
                 rng: np.random.Generator, xi: float = 0.01) -> DesignPoint:
    """Next design to evaluate: the EI maximiser against the best observed target."""
    return maximise_ei(surrogate, transform, float(np.max(surrogate.y)), rng, xi).design


@dataclass(frozen=True)
class BOStep:
    iteration: int
    design: DesignPoint
    u: np.ndarray = field(repr=False)
    estimate: UtilityEstimate = field(repr=False)
    cumulative_best: float
    exploratory: bool = False


@dataclass
class BOTrace:
    steps: list[BOStep] = field(default_factory=list)
    incumbent: DesignPoint | None = None
    incumbent_value: float = float("-inf")
    failures: list[tuple[DesignPoint, str]] = field(default_factory=list)
    surrogate: GPSurrogate | None = field(default=None, repr=False)

    @property
    def best_curve(self) -> np.ndarray:
        return np.array([s.cumulative_best for s in self.steps])

    @property
    def values(self) -> np.ndarray:
        return np.array([s.estimate.value for s in self.steps])


def default_init_count(dim: int) -> int:
    return 5 if dim == 1 else max(5, dim + 2)


def bayes_opt(fn: Callable[[DesignPoint, int], UtilityEstimate], transform: OrderedSimplexTransform,
              budget: int, init_count: int | None = None, seed: int = 0, xi: float = 0.01,
              incumbent: str = "observed", gp_restarts: int = 5) -> BOTrace:
    """Maximise a noisy black box ``fn(design, stream)`` over ordered designs.

    ``budget`` counts objective evaluations including the initial design.  A
    failed evaluation is retried once on stream 1; if that fails too the point
    is dropped from the surrogate and recorded in ``failures``.
    """
    init_count = default_init_count(transform.n) if init_count is None else init_count
    if init_count < 2 or budget < init_count:
        raise InvalidArgument(f"need budget >= init_count >= 2, got budget={budget}, init={init_count}")
    if incumbent not in ("observed", "posterior-mean"):
        raise InvalidArgument(f"unknown incumbent rule {incumbent!r}")

    trace = BOTrace()
    halton = qmc.Halton(transform.n, scramble=True, seed=substream(seed, "bo-init"))
    init_u = halton.random(init_count)
    X, y = [], []
    best = -math.inf

    def run(u, iteration, exploratory=False):
        nonlocal best
        design = transform.to_design(u)
        est = None
        for stream in (0, 1):
            try:
                est = fn(design, stream)
            except Exception as exc:  # objective failures are data, not fatal
                est = UtilityEstimate.failed(design, f"{type(exc).__name__}: {exc}")
            if est.ok:
                break
        if not est.ok:
            log.warning("evaluation %d at %s failed: %s", iteration, design, est.error)
            trace.failures.append((design, est.error))
            return
        X.append(np.asarray(u, dtype=float))
        y.append(est.value)
        if est.value > best:
            best = est.value
            trace.incumbent, trace.incumbent_value = design, est.value
        trace.steps.append(BOStep(iteration, design, np.asarray(u), est, best, exploratory))
        log.info("BO eval %d: %s -> %.4f (best %.4f)", iteration, design, est.value, best)

    for i, u in enumerate(init_u):
        run(u, i)
    for i in range(init_count, budget):
        if len(y) < 2:
            u = substream(seed, "bo-fallback", i).random(transform.n)
            run(u, i, exploratory=True)
            continue
        surrogate = gp_fit(np.array(X), np.array(y), substream(seed, "gp", i), restarts=gp_restarts)
        trace.surrogate = surrogate
        prop = maximise_ei(surrogate, transform, best, substream(seed, "acq", i), xi)
        run(prop.u, i, prop.exploratory)

    if incumbent == "posterior-mean" and len(y) >= 2:
        surrogate = gp_fit(np.array(X), np.array(y), substream(seed, "gp", budget), restarts=gp_restarts)
        trace.surrogate = surrogate
        mu, _ = surrogate.predict(np.array(X))
        k = int(np.argmax(mu))
        trace.incumbent, trace.incumbent_value = trace.steps[k].design, float(mu[k])
    return trace


def optimize_utility_bo(objective: UtilityObjective, space: DesignSpace, budget: int,
                        init_count: int | None = None, estimator: str = "lfire", xi: float = 0.01,
                        incumbent: str = "observed") -> BOTrace:
    """BO of the expected utility; the RNG tree is rooted at ``objective.seed``."""
    transform = OrderedSimplexTransform.for_space(space)
    return bayes_opt(lambda d, stream: evaluate(objective, d, estimator, stream), transform,
                     budget, init_count, objective.seed, xi, incumbent)


def optimize_utility_grid(objective: UtilityObjective, space: DesignSpace, estimator: str = "lfire",
                          stream: int = 0) -> tuple[DesignPoint, UtilityEstimate, list[UtilityEstimate]]:
    """Best grid point (first maximum, i.e. smallest tau on ties) and the full curve."""
    grid = make_grid(space)
    curve = evaluate_on_grid(objective, grid, estimator, stream)
    values = np.array([e.value if e.ok else -np.inf for e in curve])
    if not np.any(np.isfinite(values)):
        raise RuntimeError("every grid evaluation failed")
    k = int(np.argmax(values))
    return grid[k], curve[k], curve


def write_trace_csv(path: str | Path, trace: BOTrace) -> None:
    dim = max((s.design.dim for s in trace.steps), default=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + [f"tau_{k + 1}" for k in range(dim)]
                   + ["utility", "std_error", "cumulative_best"])
        for s in trace.steps:
            w.writerow([s.iteration] + [fmt(t) for t in s.design.times]
                       + [fmt(s.estimate.value), fmt(s.estimate.std_error), fmt(s.cumulative_best)])
