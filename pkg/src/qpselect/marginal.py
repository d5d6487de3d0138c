"""Log quasi-marginal likelihoods: closed form for the linear family, Laplace otherwise."""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import Dataset, ModelIndicator, PriorConfig, bits_to_columns
from .errors import OptimizerDivergedError, SingularHessianError, SingularUError, WrongFamilyError
from .families import LinearIdentity, QuasiFamily
from .quasilik import _weighted_gram, design, newton_maximize

LOG_2PI = math.log(2.0 * math.pi)

CLOSED_FORM = "closed_form"
LAPLACE = "laplace"


@dataclass(frozen=True)
class ModelEvaluation:
    gamma: ModelIndicator
    log_qmarginal: float
    map_beta: np.ndarray
    logdet_M: float
    newton_iters: int
    method: str
    jittered: bool = False


@dataclass(frozen=True)
class MapEstimate:
    beta: np.ndarray
    logdet_M: float
    iterations: int
    objective: float
    jittered: bool = False


def _bits(gamma) -> int:
    if isinstance(gamma, ModelIndicator):
        return gamma.bits
    if isinstance(gamma, (int, np.integer)):
        return int(gamma)
    m = 0
    for j in gamma:
        m |= 1 << int(j)
    return m


def _cholesky_logdet(M):
    L = linalg.cholesky(M, lower=True, check_finite=False)
    return L, 2.0 * float(np.sum(np.log(np.diag(L))))


def _jittered_logdet(M):
    """Log-determinant of ``M``, adding growing diagonal jitter if Cholesky fails."""
    try:
        return _cholesky_logdet(M)[1], False
    except linalg.LinAlgError:
        pass
    k = M.shape[0]
    jitter = 1e-8 * abs(np.trace(M)) / k
    for _ in range(7):
        try:
            return _cholesky_logdet(M + jitter * np.eye(k))[1], True
        except linalg.LinAlgError:
            jitter *= 2.0
    raise SingularHessianError("negative Hessian at the mode is not positive definite")


def map_estimate(
    d: Dataset,
    gamma,
    psi: float,
    fam: QuasiFamily,
    prior: PriorConfig,
    warm_start=None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> MapEstimate:
    """Posterior mode of ``n Q_n + log pi`` under the Gaussian slab.

    The returned ``logdet_M`` uses the observed negative Hessian plus the
    prior precision at the mode.
    """
    X = design(d, gamma)
    return _map_from_design(X, d.y, psi, fam, prior, warm_start, tol, max_iter)


def _map_from_design(X, y, psi, fam, prior, warm_start, tol, max_iter) -> MapEstimate:
    k = X.shape[1]
    if k == 0:
        obj = float(np.sum(fam.kernel(y, np.zeros(len(y)))) / psi)
        return MapEstimate(np.zeros(0), 0.0, 0, obj)
    prec = 1.0 / prior.slab_variance
    res = newton_maximize(X, y, fam, psi, prec, warm_start, tol, max_iter)
    if not res.converged and np.max(np.abs(res.gradient)) > 1e3 * tol * (1.0 + abs(res.objective)):
        raise OptimizerDivergedError(
            f"MAP Newton failed to converge in {max_iter} iterations "
            f"(max |gradient| = {np.max(np.abs(res.gradient)):.3g})"
        )
    _, w_obs, _ = fam.kernel_derivs(y, X @ res.beta)
    M = _weighted_gram(X, w_obs) / psi + prec * np.eye(k)
    logdet, jittered = _jittered_logdet(M)
    return MapEstimate(res.beta, logdet, res.iterations, res.objective, jittered)


def log_slab_density(beta, slab_variance: float) -> float:
    k = len(beta)
    return -0.5 * k * (LOG_2PI + math.log(slab_variance)) - float(beta @ beta) / (2.0 * slab_variance)


def _closed_form_from_gram(G, b, cols, psi, s2):
    """Returns ``(log f, mode, log|U/psi|)`` from the Gram matrix ``X'X`` and ``X'y``."""
    k = len(cols)
    if k == 0:
        return 0.0, np.zeros(0), 0.0
    U = G[np.ix_(cols, cols)] + (psi / s2) * np.eye(k)
    bg = b[cols]
    try:
        L = linalg.cholesky(U, lower=True, check_finite=False)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularUError(f"Cholesky of U failed for columns {cols}") from exc
    z = linalg.solve_triangular(L, bg, lower=True, check_finite=False)
    logdet_U = 2.0 * float(np.sum(np.log(np.diag(L))))
    log_f = 0.5 * k * math.log(psi) - 0.5 * k * math.log(s2) - 0.5 * logdet_U + float(z @ z) / (2.0 * psi)
    mode = linalg.solve_triangular(L.T, z, lower=False, check_finite=False)
    return log_f, mode, logdet_U - k * math.log(psi)


def log_qmarginal_closed_form(d: Dataset, gamma, psi: float, prior: PriorConfig, fam=None) -> float:
    """Exact log quasi-marginal likelihood for the linear-identity family.

    With ``U = X'X + (psi/s^2) I`` and ``m = U^{-1} X'y`` the marginal is
    ``psi^{k/2} / (s^k |U|^{1/2}) * exp(m'Um / (2 psi))``.
    """
    if fam is not None and not isinstance(fam, LinearIdentity):
        raise WrongFamilyError("closed-form marginal exists only for the linear family")
    X = design(d, gamma)
    log_f, _, _ = _closed_form_from_gram(
        X.T @ X, X.T @ d.y, list(range(X.shape[1])), psi, prior.slab_variance
    )
    return log_f


def laplace_log_marginal(fam, y, X, psi, prior, est: MapEstimate) -> float:
    k = X.shape[1]
    if k == 0:
        return est.objective
    nq = float(np.sum(fam.kernel(y, X @ est.beta))) / psi
    return nq + log_slab_density(est.beta, prior.slab_variance) + 0.5 * k * LOG_2PI - 0.5 * est.logdet_M


def log_qmarginal_laplace(
    d: Dataset,
    gamma,
    psi: float,
    fam: QuasiFamily,
    prior: PriorConfig,
    warm_start=None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> ModelEvaluation:
    """Laplace approximation around the MAP of the slab-penalised quasi-likelihood."""
    X = design(d, gamma)
    est = _map_from_design(X, d.y, psi, fam, prior, warm_start, tol, max_iter)
    log_f = laplace_log_marginal(fam, d.y, X, psi, prior, est)
    ind = gamma if isinstance(gamma, ModelIndicator) else ModelIndicator(d.p, _bits(gamma))
    return ModelEvaluation(ind, log_f, est.beta, est.logdet_M, est.iterations, LAPLACE, est.jittered)


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def as_dict(self):
        return {"hits": self.hits, "misses": self.misses, "evictions": self.evictions}


class ModelCache:
    """Per-chain store of model evaluations keyed by the inclusion bitset."""

    def __init__(self, cap: int | None = None):
        self.cap = cap
        self.entries: OrderedDict[int, ModelEvaluation] = OrderedDict()
        self.stats = CacheStats()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, bits):
        return _bits(bits) in self.entries

    def lookup(self, bits: int):
        ev = self.entries.get(bits)
        if ev is None:
            return None
        self.stats.hits += 1
        if self.cap is not None:
            self.entries.move_to_end(bits)
        return ev

    def peek(self, bits: int):
        return self.entries.get(bits)

    def store(self, bits: int, ev: ModelEvaluation):
        self.stats.misses += 1
        self.entries[bits] = ev
        if self.cap is not None:
            while len(self.entries) > self.cap:
                self.entries.popitem(last=False)
                self.stats.evictions += 1

    def dump_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for bits in sorted(self.entries):
                ev = self.entries[bits]
                rec = {
                    "gamma": format(bits, "x"),
                    "log_qmarginal": ev.log_qmarginal,
                    "map_beta": [float(v) for v in ev.map_beta],
                }
                fh.write(json.dumps(rec) + "\n")


class MarginalEvaluator:
    """Cached log quasi-marginal likelihoods for one dataset, family and prior.

    Owns a :class:`ModelCache`; not safe to share between chains.
    """

    def __init__(
        self,
        d: Dataset,
        fam: QuasiFamily,
        psi: float,
        prior: PriorConfig,
        cache: ModelCache | None = None,
        tol: float = 1e-8,
        max_iter: int = 100,
        warm_start: bool = True,
    ):
        self.d = d
        self.fam = fam
        self.psi = float(psi)
        self.prior = prior
        self.cache = ModelCache() if cache is None else cache
        self.tol = tol
        self.max_iter = max_iter
        self.warm_start = warm_start
        self.closed_form = isinstance(fam, LinearIdentity)
        if self.closed_form:
            self._gram = d.X.T @ d.X
            self._xty = d.X.T @ d.y

    def log_marginal(self, bits: int) -> float:
        ev = self.cache.lookup(bits)
        if ev is None:
            ev = self._evaluate(bits)
            self.cache.store(bits, ev)
        return ev.log_qmarginal

    def evaluate(self, gamma) -> ModelEvaluation:
        bits = _bits(gamma)
        ev = self.cache.lookup(bits)
        if ev is None:
            ev = self._evaluate(bits)
            self.cache.store(bits, ev)
        return ev

    def _warm_start(self, bits: int, cols):
        for pos, j in enumerate(cols):
            parent = self.cache.peek(bits & ~(1 << j))
            if parent is not None:
                return np.insert(parent.map_beta, pos, 0.0)
        return None

    def _evaluate(self, bits: int) -> ModelEvaluation:
        cols = bits_to_columns(bits)
        ind = ModelIndicator(self.d.p, bits)
        if self.closed_form:
            log_f, mode, logdet = _closed_form_from_gram(
                self._gram, self._xty, cols, self.psi, self.prior.slab_variance
            )
            return ModelEvaluation(ind, log_f, mode, logdet, 0, CLOSED_FORM)
        start = self._warm_start(bits, cols) if self.warm_start else None
        X = self.d.X[:, cols]
        est = _map_from_design(X, self.d.y, self.psi, self.fam, self.prior, start, self.tol, self.max_iter)
        log_f = laplace_log_marginal(self.fam, self.d.y, X, self.psi, self.prior, est)
        return ModelEvaluation(ind, log_f, est.beta, est.logdet_M, est.iterations, LAPLACE, est.jittered)


def cache_get_or_eval(cache: ModelCache, d, gamma, psi, fam, prior, tol=1e-8, max_iter=100):
    """Return the cached evaluation of ``gamma`` or compute and store it."""
    return MarginalEvaluator(d, fam, psi, prior, cache, tol, max_iter).evaluate(gamma)
