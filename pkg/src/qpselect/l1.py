"""L1-penalised quasi-likelihood fits by accelerated proximal gradient.

Only used to build the lasso variant of the dispersion estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, L1Regularized


def soft_threshold(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def _loss(X, y, fam, beta):
    return -float(np.sum(fam.kernel(y, X @ beta))) / len(y)


def _loss_grad(X, y, fam, beta):
    eta = X @ beta
    g, _, _ = fam.kernel_derivs(y, eta)
    return -float(np.sum(fam.kernel(y, eta))) / len(y), -(X.T @ g) / len(y)


def lasso_path_fit(X, y, fam, lam, penalized, beta0=None, step0=1.0, tol=1e-9, max_iter=5000):
    """Minimise ``-mean(kernel) + lam * sum(|beta_j|, j penalized)``.

    FISTA with backtracking on the smooth part; the step size is only ever
    shrunk, so the returned ``step`` can seed the next fit on a path.
    """
    k = X.shape[1]
    beta = np.zeros(k) if beta0 is None else np.array(beta0, dtype=float)
    thresh = lam * penalized.astype(float)
    z = beta.copy()
    t_mom = 1.0
    step = step0
    obj_prev = np.inf
    for _ in range(max_iter):
        f_z, g_z = _loss_grad(X, y, fam, z)
        while True:
            cand = soft_threshold(z - step * g_z, step * thresh)
            diff = cand - z
            f_c = _loss(X, y, fam, cand)
            if np.isfinite(f_c) and f_c <= f_z + g_z @ diff + (diff @ diff) / (2 * step) + 1e-15:
                break
            step *= 0.5
            if step < 1e-20:
                break
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t_mom * t_mom))
        obj = f_c + float(np.sum(thresh * np.abs(cand)))
        if obj > obj_prev:
            # restart momentum when the objective goes up
            z = beta.copy()
            t_mom = 1.0
            obj_prev = np.inf
            continue
        z = cand + ((t_mom - 1) / t_next) * (cand - beta)
        change = np.max(np.abs(cand - beta)) if k else 0.0
        beta = cand
        t_mom = t_next
        if change <= tol * (1 + np.max(np.abs(beta))) and abs(obj_prev - obj) <= tol * (1 + abs(obj)):
            break
        obj_prev = obj
    return beta, step


def lambda_max(X, y, fam, penalized, forced_fit):
    """Smallest penalty at which every penalised coefficient is zero."""
    eta = X @ forced_fit
    g, _, _ = fam.kernel_derivs(y, eta)
    grad = np.abs(X.T @ g) / len(y)
    return float(np.max(grad[penalized])) if penalized.any() else 0.0


def _unpenalized_fit(X, y, fam, penalized):
    from .quasilik import newton_maximize

    beta = np.zeros(X.shape[1])
    free = ~penalized
    if free.any():
        beta[free] = newton_maximize(X[:, free], y, fam, 1.0).beta
    return beta


@dataclass(frozen=True)
class LassoCVResult:
    beta: np.ndarray
    lam: float
    lambdas: np.ndarray
    cv_loss: np.ndarray


def lasso_cv(d: Dataset, fam, forced=(), mode: L1Regularized | None = None, seed: int = 0):
    """Choose the penalty by K-fold CV on held-out quasi-deviance, refit on all data.

    ``forced`` columns (the intercept) are not penalised. The grid has
    ``mode.n_lambdas`` points, log-spaced from the all-zero penalty down by
    ``mode.lambda_ratio``.
    """
    mode = L1Regularized() if mode is None else mode
    X, y = d.X, d.y
    penalized = np.ones(d.p, dtype=bool)
    penalized[list(forced)] = False
    base = _unpenalized_fit(X, y, fam, penalized)
    lmax = lambda_max(X, y, fam, penalized, base)
    if lmax <= 0:
        return LassoCVResult(base, 0.0, np.zeros(1), np.zeros(1))
    lambdas = lmax * np.logspace(0, np.log10(mode.lambda_ratio), mode.n_lambdas)

    rng = np.random.default_rng(np.random.Philox(seed))
    folds = rng.permutation(np.arange(d.n) % mode.folds)
    step0 = 1.0 / max(np.linalg.norm(X, 2) ** 2 / d.n, 1e-12)
    cv_loss = np.zeros(len(lambdas))
    for k in range(mode.folds):
        tr, te = folds != k, folds == k
        if not te.any() or tr.sum() < 2:
            continue
        beta = _unpenalized_fit(X[tr], y[tr], fam, penalized)
        step = step0
        for i, lam in enumerate(lambdas):
            beta, step = lasso_path_fit(X[tr], y[tr], fam, lam, penalized, beta, step)
            cv_loss[i] += -float(np.sum(fam.kernel(y[te], X[te] @ beta)))
    best = int(np.argmin(cv_loss))
    beta = base
    step = step0
    for lam in lambdas[: best + 1]:
        beta, step = lasso_path_fit(X, y, fam, lam, penalized, beta, step)
    return LassoCVResult(beta, float(lambdas[best]), lambdas, cv_loss / d.n)
