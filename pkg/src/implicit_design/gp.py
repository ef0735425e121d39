"""Gaussian-process surrogate with a squared-exponential (ARD) kernel and Expected Improvement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm

from .core import InvalidArgument

_LOG2PI = math.log(2.0 * math.pi)
MAX_JITTER = 1e-6
MIN_SIGNAL_VAR = 1e-8
MIN_NOISE_VAR = 1e-6


def se_kernel(X1: np.ndarray, X2: np.ndarray, signal_var: float, lengthscales: np.ndarray) -> np.ndarray:
    d = (X1[:, None, :] - X2[None, :, :]) / lengthscales
    return signal_var * np.exp(-0.5 * np.sum(d * d, axis=-1))


def _unpack(params: np.ndarray, dim: int, noise_var: float | None):
    log_sf, log_ell = params[0], params[1:1 + dim]
    sn2 = math.exp(2 * params[1 + dim]) if noise_var is None else noise_var
    return math.exp(2 * log_sf), np.exp(log_ell), sn2


def _cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    jitter = 0.0
    while True:
        try:
            return linalg.cholesky(K + jitter * np.eye(len(K)), lower=True), jitter
        except linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10
            if jitter > MAX_JITTER:
                raise


def log_marginal_likelihood(params: np.ndarray, X: np.ndarray, y: np.ndarray,
                            noise_var: float | None = None) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient in log-space hyperparameters.

    ``params = [log sigma_f, log ell_1..ell_D, log sigma_n]`` (the last entry
    is ignored when ``noise_var`` is fixed; its gradient is then 0).
    """
    n, dim = X.shape
    sf2, ell, sn2 = _unpack(params, dim, noise_var)
    K = se_kernel(X, X, sf2, ell)
    L, jitter = _cholesky(K + sn2 * np.eye(n))
    alpha = linalg.cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * _LOG2PI
    Kinv = linalg.cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty(dim + 2)
    grad[0] = 0.5 * np.sum(W * 2.0 * K)
    for k in range(dim):
        diff2 = (X[:, None, k] - X[None, :, k]) ** 2 / ell[k] ** 2
        grad[1 + k] = 0.5 * np.sum(W * K * diff2)
    grad[dim + 1] = 0.0 if noise_var is not None else 0.5 * np.trace(W) * 2.0 * sn2
    return float(lml), grad


@dataclass
class GPSurrogate:
    X: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    mean: float
    signal_var: float
    lengthscales: np.ndarray
    noise_var: float
    jitter: float = 0.0
    degenerate: bool = False
    log_ml: float = float("nan")
    _L: np.ndarray = field(default=None, repr=False)
    _alpha: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        K = se_kernel(self.X, self.X, self.signal_var, self.lengthscales)
        self._L, self.jitter = _cholesky(K + self.noise_var * np.eye(len(self.X)))
        self._alpha = linalg.cho_solve((self._L, True), self.y - self.mean)

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ks = se_kernel(x, self.X, self.signal_var, self.lengthscales)
        mu = self.mean + ks @ self._alpha
        v = linalg.solve_triangular(self._L, ks.T, lower=True)
        var = np.maximum(self.signal_var - np.sum(v * v, axis=0), 0.0)
        return mu, var


def gp_fit(inputs: np.ndarray, targets: np.ndarray, rng: np.random.Generator | None = None,
           restarts: int = 5, noise_var: float | None = None) -> GPSurrogate:
    """Fit kernel hyperparameters by multistart L-BFGS-B on the log marginal likelihood.

    Inputs live in the unit box, so lengthscales are bounded to [1e-2, 1e2].
    The prior mean is the sample mean of the targets.  Pass ``noise_var`` to pin
    the observation noise instead of learning it.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).reshape(-1)
    if len(X) != len(y):
        raise InvalidArgument("inputs and targets differ in length")
    if len(y) < 2:
        raise InvalidArgument("a GP fit needs at least 2 observations")
    rng = rng or np.random.default_rng(0)
    n, dim = X.shape
    mean = float(y.mean())
    yc = y - mean
    scale = float(yc.std())
    degenerate = scale <= 1e-12
    s = max(scale, 1e-3)
    bounds = ([(0.5 * math.log(MIN_SIGNAL_VAR), math.log(100 * s))]
              + [(math.log(1e-2), math.log(1e2))] * dim
              + [(0.5 * math.log(MIN_NOISE_VAR), math.log(10 * s))])
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    starts = [np.clip(np.r_[math.log(s), np.full(dim, math.log(0.3)), math.log(0.1 * s)], lo, hi)]
    starts += [rng.uniform(lo, hi) for _ in range(restarts - 1)]

    def neg(p):
        try:
            f, g = log_marginal_likelihood(p, X, yc, noise_var)
        except linalg.LinAlgError:
            return 1e25, np.zeros_like(p)
        return -f, -g

    best = None
    for p0 in starts:
        res = optimize.minimize(neg, p0, jac=True, method="L-BFGS-B", bounds=bounds)
        if best is None or res.fun < best.fun:
            best = res
    sf2, ell, sn2 = _unpack(best.x, dim, noise_var)
    if degenerate:
        sf2 = MIN_SIGNAL_VAR
    return GPSurrogate(X, y, mean, sf2, ell, sn2, degenerate=degenerate, log_ml=-float(best.fun))


def gp_predict(surrogate: GPSurrogate, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and (latent) variance at the rows of ``x``."""
    return surrogate.predict(x)


def expected_improvement(mu, sigma, incumbent_best: float, xi: float = 0.0):
    """EI for maximisation: (mu - f+ - xi) Phi(z) + sigma phi(z), z = (mu - f+ - xi) / sigma.

    Where sigma is 0 the limit max(mu - f+ - xi, 0) is returned.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    imp = mu - incumbent_best - xi
    pos = sigma > 0
    safe = np.where(pos, sigma, 1.0)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        z = imp / safe
        ei = np.where(pos, imp * norm.cdf(z) + safe * norm.pdf(z), np.maximum(imp, 0.0))
    ei = np.maximum(ei, 0.0)
    return ei if ei.ndim else float(ei)


def surrogate_ei(surrogate: GPSurrogate, x: np.ndarray, incumbent_best: float, xi: float = 0.0):
    mu, var = surrogate.predict(x)
    return expected_improvement(mu, np.sqrt(var), incumbent_best, xi)
