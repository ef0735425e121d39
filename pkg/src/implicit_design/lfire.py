"""Density-ratio estimation by penalised logistic regression (LFIRE).

The log-ratio log p(y | theta, d) / p(y | d) is the log-odds of a classifier
trained to separate data simulated at a fixed theta (label 1) from data
simulated from the marginal (label 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np
from scipy.special import expit, log_expit

from .core import DesignPoint, InvalidArgument, PriorSpec, sample_prior

FeatureKind = Literal["raw", "standardized-poly2"]

# columns whose pooled scale falls below this are treated as constant
_CONST_TOL = 1e-12
# relative residual below which a raw column counts as an affine copy of earlier ones
_COLLINEAR_TOL = 1e-9


class Simulator(Protocol):
    def simulate(self, theta, design: DesignPoint, size: int,
                 rng: np.random.Generator) -> np.ndarray: ...


def _poly2_pairs(d: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(d)
    return i, j


def _expand(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "raw":
        return z
    i, j = _poly2_pairs(z.shape[1])
    return np.hstack([z, z[:, i] * z[:, j]])


def _redundant_columns(z: np.ndarray) -> np.ndarray:
    """Flag columns that are (numerically) affine functions of earlier columns."""
    n, d = z.shape
    flags = np.zeros(d, dtype=bool)
    basis = []
    for k in range(d):
        col = z[:, k] - z[:, k].mean()
        norm = np.linalg.norm(col)
        if norm == 0:
            continue
        resid = col.copy()
        for q in basis:
            resid -= (q @ resid) * q
        rnorm = np.linalg.norm(resid)
        if rnorm <= _COLLINEAR_TOL * norm * max(1.0, np.sqrt(d)):
            flags[k] = True
        else:
            basis.append(resid / rnorm)
    return flags


@dataclass(frozen=True)
class FeatureMap:
    """Standardisation followed by an optional quadratic expansion.

    Raw data is standardised with pooled statistics, expanded (``raw`` keeps
    it as is; ``standardized-poly2`` appends all degree-2 monomials) and the
    expanded columns are standardised again.  Columns that are constant on the
    pooled data, or built only from raw columns that are affine copies of
    other columns, are marked inactive: their coefficients are fixed at 0.
    """

    kind: str
    input_dim: int
    raw_mean: np.ndarray = field(repr=False)
    raw_scale: np.ndarray = field(repr=False)
    feat_mean: np.ndarray = field(repr=False)
    feat_scale: np.ndarray = field(repr=False)
    active: np.ndarray = field(repr=False)
    constant: np.ndarray = field(repr=False)

    @property
    def output_dim(self) -> int:
        d = self.input_dim
        return d if self.kind == "raw" else d + d * (d + 1) // 2

    def transform(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y.reshape(1, -1)
        if y.shape[1] != self.input_dim:
            raise InvalidArgument(f"expected data of dimension {self.input_dim}, got {y.shape[1]}")
        z = (y - self.raw_mean) / self.raw_scale
        return (_expand(z, self.kind) - self.feat_mean) / self.feat_scale

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim,
                "raw_mean": self.raw_mean.tolist(), "raw_scale": self.raw_scale.tolist(),
                "feat_mean": self.feat_mean.tolist(), "feat_scale": self.feat_scale.tolist(),
                "active": self.active.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        return cls(d["kind"], int(d["input_dim"]), np.array(d["raw_mean"]), np.array(d["raw_scale"]),
                   np.array(d["feat_mean"]), np.array(d["feat_scale"]), np.array(d["active"], dtype=bool),
                   np.array(d["constant"], dtype=bool))


def fit_feature_map(numerator: np.ndarray, denominator: np.ndarray,
                    kind: FeatureKind = "standardized-poly2") -> FeatureMap:
    """Fit standardisation statistics on the pooled data of both classes."""
    if kind not in ("raw", "standardized-poly2"):
        raise InvalidArgument(f"unknown feature kind {kind!r}")
    pooled = np.vstack([np.atleast_2d(numerator), np.atleast_2d(denominator)]).astype(float)
    if pooled.size == 0:
        raise InvalidArgument("cannot fit a feature map on empty data")
    d = pooled.shape[1]
    raw_mean = pooled.mean(axis=0)
    raw_sd = pooled.std(axis=0)
    raw_const = raw_sd <= _CONST_TOL * np.maximum(1.0, np.abs(raw_mean))
    raw_scale = np.where(raw_const, 1.0, raw_sd)
    z = (pooled - raw_mean) / raw_scale
    redundant = raw_const | _redundant_columns(z)

    expanded = _expand(z, kind)
    feat_mean = expanded.mean(axis=0)
    feat_sd = expanded.std(axis=0)
    feat_const = feat_sd <= _CONST_TOL * np.maximum(1.0, np.abs(feat_mean))
    feat_scale = np.where(feat_const, 1.0, feat_sd)
    if kind == "raw":
        uses_redundant = redundant
    else:
        i, j = _poly2_pairs(d)
        uses_redundant = np.concatenate([redundant, redundant[i] | redundant[j]])
    active = ~(feat_const | uses_redundant)
    return FeatureMap(kind, d, raw_mean, raw_scale, feat_mean, feat_scale, active, feat_const)


@dataclass(frozen=True)
class Regularization:
    """L2 penalty on the coefficients (not the intercept).

    The objective is the summed log-loss over both classes plus
    ``penalty / 2 * ||coef||^2``; ``penalty=None`` means 1/M.  With
    ``cv_folds >= 2`` the penalty is picked from ``grid`` by k-fold
    cross-validated log-loss instead.
    """

    penalty: float | None = None
    cv_folds: int = 0
    grid: tuple[float, ...] = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    tol: float = 1e-8
    max_iter: int = 200

    def resolve(self, m: int) -> float:
        return 1.0 / m if self.penalty is None else float(self.penalty)


@dataclass(frozen=True)
class LogisticFit:
    intercept: float
    coef: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def _objective(w, X, y, lam):
    eta = w[0] + X @ w[1:]
    loss = -np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta))
    return loss + 0.5 * lam * (w[1:] @ w[1:])


def fit_logistic(X: np.ndarray, y: np.ndarray, penalty: float, tol: float = 1e-8,
                 max_iter: int = 200, init: np.ndarray | None = None) -> LogisticFit:
    """L2-penalised logistic regression by damped Newton iterations.

    Stops when the gradient norm of the penalised summed log-loss drops below
    ``tol``; otherwise returns the last iterate flagged as not converged.
    """
    n, p = X.shape
    A = np.hstack([np.ones((n, 1)), X])
    w = np.zeros(p + 1) if init is None else np.asarray(init, dtype=float).copy()
    reg = np.full(p + 1, penalty)
    reg[0] = 0.0
    f = _objective(w, X, y, penalty)
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        s = expit(A @ w)
        grad = A.T @ (s - y) + reg * w
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol:
            return LogisticFit(w[0], w[1:], True, it - 1, grad_norm)
        weights = s * (1.0 - s)
        H = (A * weights[:, None]).T @ A
        H[np.diag_indices_from(H)] += reg + 1e-12
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        slope = grad @ step
        slack = 1e-12 * max(1.0, abs(f))
        while True:
            w_new = w - t * step
            f_new = _objective(w_new, X, y, penalty)
            if f_new <= f - 1e-4 * t * slope + slack:
                break
            t *= 0.5
            if t < 1e-10:
                # no descent possible in floating point: treat as stationary
                return LogisticFit(w[0], w[1:], grad_norm < np.sqrt(tol), it, grad_norm)
        w, f = w_new, f_new
    s = expit(A @ w)
    grad_norm = float(np.linalg.norm(A.T @ (s - y) + reg * w))
    return LogisticFit(w[0], w[1:], grad_norm < tol, max_iter, grad_norm)


@dataclass(frozen=True)
class RatioModel:
    """Fitted log-ratio: intercept + coefficients . features(y)."""

    intercept: float
    coefficients: np.ndarray = field(repr=False)
    feature_map: FeatureMap = field(repr=False)
    converged: bool = True
    iterations: int = 0

    def log_ratio(self, y: np.ndarray) -> np.ndarray:
        return self.intercept + self.feature_map.transform(y) @ self.coefficients

    def to_dict(self) -> dict:
        return {"intercept": self.intercept, "coefficients": self.coefficients.tolist(),
                "feature_map": self.feature_map.to_dict(), "converged": self.converged,
                "iterations": self.iterations}

    @classmethod
    def from_dict(cls, d: dict) -> "RatioModel":
        return cls(float(d["intercept"]), np.array(d["coefficients"], dtype=float),
                   FeatureMap.from_dict(d["feature_map"]), bool(d["converged"]), int(d["iterations"]))


def log_ratio(model: RatioModel, y: np.ndarray) -> float:
    """Scalar log-ratio estimate for a single outcome."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size != model.feature_map.input_dim:
        raise InvalidArgument(
            f"outcome of shape {y.shape} does not match input dimension {model.feature_map.input_dim}")
    return float(model.log_ratio(y)[0])


def identity_ratio(input_dim: int, kind: FeatureKind = "raw") -> RatioModel:
    """Ratio model with all coefficients zero, i.e. r = 1 everywhere."""
    zeros = np.zeros(input_dim)
    fmap = fit_feature_map(zeros, zeros, kind)
    return RatioModel(0.0, np.zeros(fmap.output_dim), fmap)


@dataclass(frozen=True)
class MarginalDataset:
    """Outcomes y ~ p(y | d) simulated at a single design."""

    design: DesignPoint
    outcomes: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.outcomes.shape[0]


def sample_marginal(design: DesignPoint, prior: PriorSpec, model: Simulator, M: int,
                    rng: np.random.Generator) -> MarginalDataset:
    """Simulate M outcomes, each from its own fresh prior draw."""
    if M < 2:
        raise InvalidArgument(f"marginal dataset needs at least 2 outcomes, got {M}")
    thetas = sample_prior(prior, M, rng)
    rows = [model.simulate(theta, design, 1, rng)[0] for theta in thetas]
    return MarginalDataset(design, np.asarray(rows))


def _cv_penalty(F: np.ndarray, labels: np.ndarray, reg: Regularization,
                rng: np.random.Generator) -> float:
    folds = rng.permutation(len(labels)) % reg.cv_folds
    best, best_loss = reg.grid[0], np.inf
    for lam in reg.grid:
        loss = 0.0
        for k in range(reg.cv_folds):
            train, test = folds != k, folds == k
            fit = fit_logistic(F[train], labels[train], lam, reg.tol, reg.max_iter)
            w = np.concatenate([[fit.intercept], fit.coef])
            loss += _objective(w, F[test], labels[test], 0.0)
        if loss < best_loss:
            best, best_loss = lam, loss
    return best


def fit_ratio_from_data(positive: np.ndarray, negative: np.ndarray,
                        kind: FeatureKind = "standardized-poly2",
                        reg: Regularization | None = None,
                        rng: np.random.Generator | None = None) -> RatioModel:
    """Fit log p_pos / p_neg from samples of the two distributions.

    With unequal class sizes the fitted log-odds carry the offset
    log(M_pos / M_neg), which is removed from the intercept.
    """
    reg = reg or Regularization()
    positive = np.atleast_2d(np.asarray(positive, dtype=float))
    negative = np.atleast_2d(np.asarray(negative, dtype=float))
    fmap = fit_feature_map(positive, negative, kind)
    F = fmap.transform(np.vstack([positive, negative]))
    labels = np.concatenate([np.ones(len(positive)), np.zeros(len(negative))])
    active = np.flatnonzero(fmap.active)
    m = min(len(positive), len(negative))
    if reg.cv_folds >= 2:
        penalty = _cv_penalty(F[:, active], labels, reg, rng or np.random.default_rng(0))
    else:
        penalty = reg.resolve(m)
    fit = fit_logistic(F[:, active], labels, penalty, reg.tol, reg.max_iter)
    coef = np.zeros(fmap.output_dim)
    coef[active] = fit.coef
    intercept = fit.intercept - np.log(len(positive) / len(negative))
    return RatioModel(float(intercept), coef, fmap, fit.converged, fit.iterations)


def fit_ratio(design: DesignPoint, theta: np.ndarray, model: Simulator, marginal: MarginalDataset,
              M: int, reg: Regularization | None = None, rng: np.random.Generator | None = None,
              kind: FeatureKind = "standardized-poly2") -> RatioModel:
    """LFIRE ratio at (design, theta): M simulations at theta against the marginal."""
    if marginal.design != design:
        raise InvalidArgument("marginal dataset was simulated at a different design")
    if M < 1:
        raise InvalidArgument(f"M must be positive, got {M}")
    if rng is None:
        raise InvalidArgument("fit_ratio needs an explicit random generator")
    positive = model.simulate(theta, design, M, rng)
    return fit_ratio_from_data(positive, marginal.outcomes, kind, reg, rng)
