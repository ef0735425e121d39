"""Shared domain types: designs, design spaces, priors and seeded RNG streams."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats


class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class DegeneratePrior(RuntimeError):
    """Raised when rejection sampling of a truncated prior essentially never accepts."""


# minimum acceptance rate tolerated by the truncated-normal rejection sampler
MIN_ACCEPTANCE = 1e-6


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise InvalidArgument(f"stream keys must be non-negative, got {key}")
    return int(key)


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return an independent generator for the position ``path`` under ``seed``.

    Streams form a tree: ``substream(s, "mi", 0, i)`` is the stream used for
    prior sample ``i`` of the first utility evaluation, whatever order the
    samples are processed in.
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in path))
    return np.random.Generator(np.random.PCG64(seq))


@dataclass(frozen=True)
class DesignPoint:
    """Ordered vector of measurement times."""

    times: tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in np.atleast_1d(self.times))
        if not times:
            raise InvalidArgument("a design needs at least one measurement time")
        if any(not math.isfinite(t) for t in times):
            raise InvalidArgument(f"non-finite design times {times}")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidArgument(f"design times must be strictly increasing, got {times}")
        object.__setattr__(self, "times", times)

    @property
    def dim(self) -> int:
        return len(self.times)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.times, dtype=float)

    def __str__(self):
        return "(" + ", ".join(f"{t:.4g}" for t in self.times) + ")"


@dataclass(frozen=True)
class DesignSpace:
    """Region lower < tau_1 < ... < tau_n <= upper, plus an optional 1-D grid step."""

    dim: int
    lower: float
    upper: float
    grid_step: float | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidArgument(f"design dimension must be positive, got {self.dim}")
        if not self.lower < self.upper:
            raise InvalidArgument(f"need lower < upper, got ({self.lower}, {self.upper}]")
        if self.grid_step is not None and self.grid_step <= 0:
            raise InvalidArgument(f"grid step must be positive, got {self.grid_step}")

    @classmethod
    def death(cls, dim: int = 1, grid_step: float | None = 0.1) -> "DesignSpace":
        return cls(dim, 0.0, 4.0, grid_step)

    @classmethod
    def sir(cls, dim: int = 1, grid_step: float | None = 0.1) -> "DesignSpace":
        return cls(dim, 0.0, 3.0, grid_step)

    def contains(self, design: DesignPoint) -> bool:
        t = design.as_array()
        return design.dim == self.dim and bool(t[0] > self.lower and t[-1] <= self.upper)


@dataclass(frozen=True)
class TruncatedNormalPrior:
    """Normal(mean, variance) restricted to theta > lower_bound (one parameter)."""

    mean: float = 1.0
    variance: float = 1.0
    lower_bound: float = 0.0

    param_dim = 1
    kind = "truncated-normal"

    def __post_init__(self):
        if self.variance <= 0:
            raise InvalidArgument(f"variance must be positive, got {self.variance}")

    @property
    def _dist(self):
        sd = math.sqrt(self.variance)
        return stats.truncnorm((self.lower_bound - self.mean) / sd, np.inf, loc=self.mean, scale=sd)

    @property
    def acceptance_rate(self) -> float:
        sd = math.sqrt(self.variance)
        return float(stats.norm.sf(self.lower_bound, loc=self.mean, scale=sd))

    def analytic_mean(self) -> float:
        sd = math.sqrt(self.variance)
        alpha = (self.lower_bound - self.mean) / sd
        return self.mean + sd * stats.norm.pdf(alpha) / stats.norm.sf(alpha)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        rate = self.acceptance_rate
        if rate < MIN_ACCEPTANCE:
            raise DegeneratePrior(f"truncation acceptance rate {rate:.3g} is below {MIN_ACCEPTANCE}")
        sd = math.sqrt(self.variance)
        out = np.empty(0)
        while out.size < count:
            need = count - out.size
            batch = rng.normal(self.mean, sd, size=int(need / rate * 1.1) + 16)
            out = np.concatenate([out, batch[batch > self.lower_bound]])
        return out[:count].reshape(count, 1)

    def pdf(self, theta: np.ndarray) -> np.ndarray:
        return self._dist.pdf(np.asarray(theta, dtype=float).reshape(-1))

    def bounds(self) -> np.ndarray:
        """Plotting/quadrature box: lower bound up to mean + 5 sd."""
        return np.array([[self.lower_bound, self.mean + 5.0 * math.sqrt(self.variance)]])

    def in_support(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1, 1)
        return np.isfinite(theta[:, 0]) & (theta[:, 0] > self.lower_bound)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": self.mean, "variance": self.variance,
                "lower_bound": self.lower_bound}


@dataclass(frozen=True)
class UniformBoxPrior:
    """Independent uniform priors on a box, one interval per parameter."""

    low: tuple[float, ...] = (0.0, 0.0)
    high: tuple[float, ...] = (0.5, 0.5)
    kind = "uniform-box"

    def __post_init__(self):
        low = tuple(float(v) for v in self.low)
        high = tuple(float(v) for v in self.high)
        if len(low) != len(high) or not low:
            raise InvalidArgument("uniform box needs matching non-empty low/high vectors")
        if any(h <= lo for lo, h in zip(low, high)):
            raise InvalidArgument(f"uniform box needs low < high, got {low}, {high}")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def param_dim(self) -> int:
        return len(self.low)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(count, self.param_dim))

    def pdf(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1, self.param_dim)
        vol = float(np.prod(np.subtract(self.high, self.low)))
        return np.where(self.in_support(theta), 1.0 / vol, 0.0)

    def bounds(self) -> np.ndarray:
        return np.column_stack([self.low, self.high])

    def in_support(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1, self.param_dim)
        return np.all(np.isfinite(theta) & (theta >= self.low) & (theta <= self.high), axis=1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "low": list(self.low), "high": list(self.high)}


PriorSpec = TruncatedNormalPrior | UniformBoxPrior


def prior_from_dict(d: dict) -> PriorSpec:
    kind = d.get("kind")
    if kind == "truncated-normal":
        return TruncatedNormalPrior(d.get("mean", 1.0), d.get("variance", 1.0), d.get("lower_bound", 0.0))
    if kind == "uniform-box":
        return UniformBoxPrior(tuple(d["low"]), tuple(d["high"]))
    raise InvalidArgument(f"unknown prior kind {kind!r}")


def sample_prior(prior: PriorSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` i.i.d. parameter vectors, shape (count, param_dim)."""
    if count < 1:
        raise InvalidArgument(f"count must be positive, got {count}")
    return prior.sample(int(count), rng)


def make_grid(space: DesignSpace) -> list[DesignPoint]:
    """Grid lower + k*step for k = 1, 2, ... up to and including ``upper``."""
    if space.grid_step is None:
        raise InvalidArgument("grid search needs a grid step")
    if space.dim != 1:
        raise InvalidArgument(f"grid search is only supported for 1-D designs, got dim={space.dim}")
    ratio = (space.upper - space.lower) / space.grid_step
    count = int(math.floor(ratio + 1e-9))
    if count < 1:
        raise InvalidArgument(f"grid step {space.grid_step} exceeds the design range")
    return [DesignPoint((space.lower + k * space.grid_step,)) for k in range(1, count + 1)]


def equidistant_design(space: DesignSpace) -> DesignPoint:
    """tau_k = lower + k (upper - lower) / n for k = 1..n."""
    step = (space.upper - space.lower) / space.dim
    return DesignPoint(tuple(space.lower + k * step for k in range(1, space.dim + 1)))


def fingerprint(array: np.ndarray) -> str:
    import hashlib

    arr = np.ascontiguousarray(array, dtype=float)
    return hashlib.sha256(arr.tobytes() + str(arr.shape).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PriorBank:
    """Fixed set of prior draws shared by every design evaluation of an experiment."""

    draws: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.draws.shape[0]

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.draws)


def as_design(times: float | Sequence[float] | DesignPoint) -> DesignPoint:
    if isinstance(times, DesignPoint):
        return times
    return DesignPoint(tuple(np.atleast_1d(np.asarray(times, dtype=float))))
