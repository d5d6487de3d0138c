"""Quasi-log-likelihood, its derivatives, and dispersion estimation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .core import (
    Dataset,
    FixedDispersion,
    FullModelQMLE,
    L1Regularized,
    ModelIndicator,
    bits_to_columns,
)
from .errors import (
    DimensionMismatchError,
    InsufficientSamplesError,
    NonPositiveDispersionError,
    OptimizerDivergedError,
    WrongFamilyError,
)
from .families import LinearIdentity, PoissonLog, QuasiFamily

logger = logging.getLogger(__name__)

PSI_FLOOR = 1e-10


class ExactFitWarning(UserWarning):
    """The full-model fit has (numerically) zero Pearson residuals."""


def columns_of(gamma, p=None) -> list:
    if isinstance(gamma, ModelIndicator):
        return gamma.columns()
    if isinstance(gamma, (int, np.integer)) and not isinstance(gamma, bool):
        return bits_to_columns(int(gamma))
    return [int(j) for j in gamma]


def design(d: Dataset, gamma) -> np.ndarray:
    return d.X[:, columns_of(gamma)]


def _check(Xg, beta, psi):
    if beta.shape != (Xg.shape[1],):
        raise DimensionMismatchError(
            f"beta has shape {beta.shape}, model has {Xg.shape[1]} active columns"
        )
    if not psi > 0:
        raise NonPositiveDispersionError(f"dispersion must be positive, got {psi}")


def quasi_loglik(d: Dataset, gamma, beta, psi: float, fam: QuasiFamily) -> float:
    """Total quasi-log-likelihood ``n * Q_n`` of the submodel at ``beta``."""
    Xg = design(d, gamma)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    _check(Xg, beta, psi)
    eta = Xg @ beta if beta.size else np.zeros(d.n)
    return float(np.sum(fam.kernel(d.y, eta)) / psi)


@dataclass(frozen=True)
class QuasiEval:
    value: float
    gradient: np.ndarray
    neg_hessian: np.ndarray
    fisher_neg_hessian: np.ndarray


def quasi_eval(d: Dataset, gamma, beta, psi: float, fam: QuasiFamily) -> QuasiEval:
    """Value, gradient, observed and expected negative Hessian of ``n * Q_n``."""
    Xg = design(d, gamma)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    _check(Xg, beta, psi)
    eta = Xg @ beta if beta.size else np.zeros(d.n)
    value = float(np.sum(fam.kernel(d.y, eta)) / psi)
    g, w_obs, w_fisher = fam.kernel_derivs(d.y, eta)
    grad = Xg.T @ g / psi
    H = _weighted_gram(Xg, w_obs) / psi
    F = _weighted_gram(Xg, w_fisher) / psi
    return QuasiEval(value, grad, H, F)


def _weighted_gram(X, w):
    G = (X * w[:, None]).T @ X
    return 0.5 * (G + G.T)


@dataclass
class NewtonResult:
    beta: np.ndarray
    objective: float
    gradient: np.ndarray
    iterations: int
    converged: bool


def newton_maximize(
    X: np.ndarray,
    y: np.ndarray,
    fam: QuasiFamily,
    psi: float,
    prior_precision: float = 0.0,
    beta0=None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> NewtonResult:
    """Maximise ``sum(kernel)/psi - prior_precision * |beta|^2 / 2``.

    Steps solve ``M delta = gradient`` with ``M`` the observed negative
    Hessian plus the prior precision when that is positive definite, and
    the expected-information matrix (positive definite for every family
    whenever ``X`` has full column rank or the prior is proper) otherwise. Each
    step is halved (up to 50 times) until the objective does not decrease.
    Convergence: ``max|gradient| <= tol * (1 + |objective|)``.
    """
    k = X.shape[1]
    beta = np.zeros(k) if beta0 is None else np.array(beta0, dtype=float)
    if k == 0:
        obj = float(np.sum(fam.kernel(y, np.zeros(len(y)))) / psi)
        return NewtonResult(beta, obj, beta.copy(), 0, True)

    def evaluate(b):
        eta = X @ b
        obj = np.sum(fam.kernel(y, eta)) / psi - 0.5 * prior_precision * (b @ b)
        return float(obj), eta

    obj, eta = evaluate(beta)
    if not np.isfinite(obj):
        beta = np.zeros(k)
        obj, eta = evaluate(beta)
    eye = np.eye(k)
    grad = None
    for it in range(max_iter + 1):
        g, w_obs, w_fisher = fam.kernel_derivs(y, eta)
        grad = X.T @ g / psi - prior_precision * beta
        if np.max(np.abs(grad)) <= tol * (1.0 + abs(obj)):
            return NewtonResult(beta, obj, grad, it, True)
        if it == max_iter:
            break
        delta = None
        if np.all(w_obs >= 0):
            # full Newton step: quadratic convergence where the kernel is locally concave
            try:
                c = linalg.cho_factor(_weighted_gram(X, w_obs) / psi + prior_precision * eye,
                                      lower=True, check_finite=False)
                delta = linalg.cho_solve(c, grad, check_finite=False)
            except linalg.LinAlgError:
                delta = None
        if delta is None:
            delta = _pd_solve(_weighted_gram(X, w_fisher) / psi + prior_precision * eye, grad)
        step = 1.0
        for _ in range(51):
            cand = beta + step * delta
            cand_obj, cand_eta = evaluate(cand)
            if np.isfinite(cand_obj) and cand_obj >= obj:
                break
            step *= 0.5
        else:
            # no ascent possible at machine precision
            loose = 1e3 * tol * (1.0 + abs(obj))
            return NewtonResult(beta, obj, grad, it, np.max(np.abs(grad)) <= loose)
        beta, obj, eta = cand, cand_obj, cand_eta
    return NewtonResult(beta, obj, grad, max_iter, False)


def _pd_solve(M, rhs):
    try:
        c = linalg.cho_factor(M, lower=True, check_finite=False)
        return linalg.cho_solve(c, rhs, check_finite=False)
    except linalg.LinAlgError:
        jitter = 1e-10 * max(np.trace(M) / len(M), 1.0)
        return linalg.solve(M + jitter * np.eye(len(M)), rhs, assume_a="sym")


def fit_qmle(d: Dataset, gamma, fam: QuasiFamily, psi: float = 1.0, tol=1e-8, max_iter=100):
    """Unpenalised quasi-likelihood maximiser for the columns in ``gamma``."""
    X = design(d, gamma)
    res = newton_maximize(X, d.y, fam, psi, 0.0, None, tol, max_iter)
    if not res.converged and np.max(np.abs(res.gradient)) > 1e3 * tol * (1 + abs(res.objective)):
        raise OptimizerDivergedError(
            f"quasi-likelihood Newton did not converge in {max_iter} iterations"
        )
    return res


@dataclass(frozen=True)
class DispersionEstimate:
    psi: float
    beta: np.ndarray
    dof: int
    exact_fit: bool


def estimate_dispersion(
    d: Dataset,
    fam: QuasiFamily,
    mode=None,
    forced=(),
    seed: int = 0,
) -> float:
    """Pearson-type dispersion estimate (see :func:`estimate_dispersion_detail`)."""
    return estimate_dispersion_detail(d, fam, mode, forced, seed).psi


def estimate_dispersion_detail(d, fam, mode=None, forced=(), seed=0) -> DispersionEstimate:
    """Estimate the dispersion from a full-model fit.

    ``FullModelQMLE`` uses the quasi-likelihood maximiser over all ``p``
    columns and divides the Pearson statistic by ``n - p``.
    ``L1Regularized`` uses a cross-validated lasso fit instead and divides
    by ``n - k`` with ``k`` the number of nonzero coefficients.
    ``FixedDispersion`` returns its value.
    """
    mode = FullModelQMLE() if mode is None else mode
    if isinstance(mode, FixedDispersion):
        return DispersionEstimate(float(mode.value), np.zeros(0), 0, False)
    if isinstance(mode, FullModelQMLE):
        if d.n <= d.p:
            raise InsufficientSamplesError(
                f"full-model dispersion needs n > p, got n={d.n}, p={d.p}"
            )
        beta = fit_qmle(d, range(d.p), fam).beta
        dof = d.n - d.p
    elif isinstance(mode, L1Regularized):
        if d.n <= 1:
            raise InsufficientSamplesError("lasso dispersion needs n > 1")
        if not isinstance(fam, (LinearIdentity, PoissonLog)):
            raise WrongFamilyError("lasso dispersion supports the linear and Poisson families only")
        from .l1 import lasso_cv

        beta = lasso_cv(d, fam, forced, mode, seed).beta
        dof = d.n - int(np.count_nonzero(beta))
        if dof <= 0:
            raise InsufficientSamplesError("lasso fit has as many nonzeros as observations")
    else:
        raise TypeError(f"unknown dispersion mode {mode!r}")
    eta = d.X @ beta
    pearson = float(np.sum(fam.pearson_residuals_sq(d.y, eta)))
    psi = pearson / dof
    exact = False
    if not psi > PSI_FLOOR:
        warnings.warn(
            f"exact fit: dispersion estimate {psi:.3g} clamped to {PSI_FLOOR}",
            ExactFitWarning,
            stacklevel=2,
        )
        psi = PSI_FLOOR
        exact = True
    return DispersionEstimate(psi, beta, dof, exact)


def pearson_dispersion(d: Dataset, gamma, beta, fam: QuasiFamily) -> float:
    """Pearson statistic of a submodel fit divided by ``n - |gamma|``."""
    X = design(d, gamma)
    dof = d.n - X.shape[1]
    if dof <= 0:
        raise InsufficientSamplesError(f"need n > {X.shape[1]} for a Pearson dispersion")
    eta = X @ beta if X.shape[1] else np.zeros(d.n)
    return max(float(np.sum(fam.pearson_residuals_sq(d.y, eta))) / dof, PSI_FLOOR)


THETA_MIN = 1e-3
THETA_MAX = 1e6


def estimate_nb_theta(d: Dataset, gamma=None, mu=None) -> float:
    """Moment estimate of the negative-binomial shape from a Poisson fit.

    Solves ``sum (y - mu)^2 / (mu + mu^2/theta) = n - k`` for ``theta``
    with Brent's method in log space on ``[1e-3, 1e6]``; returns the upper cap when
    the data are not overdispersed.
    """
    cols = list(range(d.p)) if gamma is None else columns_of(gamma)
    k = len(cols)
    if d.n <= k:
        raise InsufficientSamplesError(f"theta estimation needs n > {k}, got n={d.n}")
    if np.any(d.y < 0):
        raise InsufficientSamplesError("negative-binomial theta needs non-negative counts")
    if mu is None:
        mu = np.exp(d.X[:, cols] @ fit_qmle(d, cols, PoissonLog()).beta)
    r2 = (d.y - mu) ** 2
    target = d.n - k

    def excess(log_theta):
        th = np.exp(log_theta)
        return np.sum(r2 / (mu + mu * mu / th)) - target

    lo, hi = np.log(THETA_MIN), np.log(THETA_MAX)
    if excess(hi) <= 0:
        return THETA_MAX
    if excess(lo) >= 0:
        return THETA_MIN
    return float(np.exp(optimize.brentq(excess, lo, hi, xtol=1e-12, rtol=1e-14)))
