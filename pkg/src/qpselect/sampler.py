"""Random-scan Gibbs sampling over inclusion indicators.

Also provides exhaustive enumeration of the model quasi-posterior for small
``p`` (the sampler's test oracle) and coefficient sampling for a fixed model.
"""

from __future__ import annotations

import csv
import gzip
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import betaln, logsumexp

from .core import BetaBinomial, Dataset, FixedW, PriorConfig, RunConfig
from .errors import TooManyPredictorsError
from .families import QuasiFamily
from .marginal import MarginalEvaluator, ModelCache, log_slab_density
from .quasilik import _weighted_gram

MAX_ENUMERATE = 15


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based stream; one per chain."""
    return np.random.Generator(np.random.Philox(seed % (1 << 64)))


def inclusion_probability(log_f_plus: float, log_f_minus: float, w: float) -> float:
    """``P(gamma_j = 1 | rest) = (1 + B(minus, plus) (1 - w) / w)^-1``, in log space."""
    lo = log_f_plus - log_f_minus + math.log(w) - math.log1p(-w)
    if lo >= 0:
        return 1.0 / (1.0 + math.exp(-lo))
    e = math.exp(lo)
    return e / (1.0 + e)


@dataclass
class SamplerOutput:
    gamma_draws: np.ndarray
    w_draws: np.ndarray | None
    rb_ppi: np.ndarray
    cumulative_ppi: np.ndarray
    cond_probs: np.ndarray
    burn_in: int
    cache_stats: dict
    visited_models: int
    column_names: tuple = field(default=())

    def model_frequencies(self, burn_in: int | None = None) -> dict:
        """Empirical frequency of each visited model after burn-in, keyed by bitset."""
        start = self.burn_in if burn_in is None else burn_in
        weights = 1 << np.arange(self.gamma_draws.shape[1], dtype=object)
        counts: dict = {}
        rows = self.gamma_draws[start:]
        for row in rows:
            key = int(np.sum(weights[row]))
            counts[key] = counts.get(key, 0) + 1
        return {k: v / len(rows) for k, v in counts.items()}

    def write_rb_ppi(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["column", "ppi"])
            for name, v in zip(self.column_names, self.rb_ppi):
                w.writerow([name, repr(float(v))])

    def write_cumulative_ppi(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sweep", *self.column_names])
            for t, row in enumerate(self.cumulative_ppi, start=1):
                w.writerow([t, *(repr(float(v)) for v in row)])

    def write_gamma_hex(self, path):
        weights = 1 << np.arange(self.gamma_draws.shape[1], dtype=object)
        # mtime=0 and an empty stored name keep the archive byte-identical across runs
        with open(path, "wb") as fh, gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as raw:
            for row in self.gamma_draws:
                raw.write((format(int(np.sum(weights[row])), "x") + "\n").encode("ascii"))


def gibbs_run(
    d: Dataset,
    fam: QuasiFamily,
    prior: PriorConfig,
    run: RunConfig,
    psi: float,
    evaluator: MarginalEvaluator | None = None,
) -> SamplerOutput:
    """Random-scan Gibbs sampler over ``gamma`` (and ``w`` under a Beta prior).

    Every sweep visits the free columns in a fresh uniform permutation and
    resamples each indicator from its full conditional; the conditional
    probabilities are kept for Rao-Blackwellised inclusion estimates. Forced
    columns stay in and get inclusion probability 1. Under a Beta prior ``w``
    is redrawn after each sweep from ``Beta(a + k, b + q - k)`` where ``q`` is
    the number of free columns and ``k`` how many are included.
    """
    if evaluator is None:
        evaluator = MarginalEvaluator(
            d, fam, psi, prior, ModelCache(run.cache_cap), run.newton_tol, run.newton_max_iter
        )
    p = d.p
    forced = run.forced_columns(d)
    free = np.array([j for j in range(p) if j not in forced], dtype=np.int64)
    q = len(free)
    free_mask = 0
    for j in free:
        free_mask |= 1 << int(j)

    rng = make_rng(run.seed)
    sweeps = run.sweeps
    fixed = isinstance(prior.sparsity, FixedW)
    if fixed:
        w = prior.sparsity.w
    else:
        a, b = prior.sparsity.a, prior.sparsity.b
        w = a / (a + b)

    state = np.zeros(p, dtype=bool)
    state[list(forced)] = True
    bits = 0
    for j in forced:
        bits |= 1 << j

    gamma_draws = np.zeros((sweeps, p), dtype=bool)
    cond = np.ones((sweeps, p))
    w_draws = None if fixed else np.empty(sweeps)
    visited = {bits}
    log_marginal = evaluator.log_marginal
    exp = math.exp

    for t in range(sweeps):
        order = rng.permutation(free).tolist()
        u = rng.random(q).tolist()
        logit_w = math.log(w) - math.log1p(-w)
        row = cond[t]
        for idx, j in enumerate(order):
            plus = bits | (1 << j)
            minus = plus ^ (1 << j)
            lo = log_marginal(plus) - log_marginal(minus) + logit_w
            if lo >= 0:
                prob = 1.0 / (1.0 + exp(-lo))
            else:
                e = exp(lo)
                prob = e / (1.0 + e)
            row[j] = prob
            if u[idx] < prob:
                bits = plus
                state[j] = True
            else:
                bits = minus
                state[j] = False
        gamma_draws[t] = state
        visited.add(bits)
        if not fixed:
            k = bin(bits & free_mask).count("1")
            w = float(rng.beta(a + k, b + q - k))
            # keep log(w) and log(1 - w) finite
            w = min(max(w, 1e-300), 1.0 - 1e-16)
            w_draws[t] = w

    rb = cond[run.burn_in:].mean(axis=0)
    rb[list(forced)] = 1.0
    cumulative = np.cumsum(cond, axis=0) / np.arange(1, sweeps + 1)[:, None]
    return SamplerOutput(
        gamma_draws=gamma_draws,
        w_draws=w_draws,
        rb_ppi=rb,
        cumulative_ppi=cumulative,
        cond_probs=cond,
        burn_in=run.burn_in,
        cache_stats=evaluator.cache.stats.as_dict(),
        visited_models=len(visited),
        column_names=d.column_names,
    )


@dataclass(frozen=True)
class ExactPosterior:
    models: np.ndarray
    log_marginals: np.ndarray
    probs: np.ndarray
    ppi: np.ndarray
    w_mean: float | None = None

    def prob_of(self, bits: int) -> float:
        idx = np.flatnonzero(self.models == bits)
        return float(self.probs[idx[0]]) if idx.size else 0.0


def enumerate_exact(
    d: Dataset | None,
    fam: QuasiFamily | None,
    prior: PriorConfig,
    psi: float,
    forced=(),
    log_marginal=None,
    p: int | None = None,
) -> ExactPosterior:
    """Model quasi-posterior over every configuration of the free columns.

    ``log_marginal(bits)`` overrides the computed marginals (used with
    hand-set values in tests); then ``p`` must be given if ``d`` is None.
    Under a Beta prior the inclusion probability is integrated out
    analytically and ``w_mean`` holds its posterior mean.
    """
    p = d.p if p is None else p
    forced = tuple(forced)
    free = [j for j in range(p) if j not in forced]
    q = len(free)
    if q > MAX_ENUMERATE:
        raise TooManyPredictorsError(f"enumeration supports at most {MAX_ENUMERATE} free columns, got {q}")
    if log_marginal is None:
        log_marginal = MarginalEvaluator(d, fam, psi, prior).log_marginal
    base = 0
    for j in forced:
        base |= 1 << j
    n_models = 1 << q
    models = np.empty(n_models, dtype=np.int64)
    sizes = np.empty(n_models, dtype=np.int64)
    for m in range(n_models):
        bits = base
        for i, j in enumerate(free):
            if (m >> i) & 1:
                bits |= 1 << j
        models[m] = bits
        sizes[m] = bin(m).count("1")
    logm = np.array([log_marginal(int(b)) for b in models], dtype=float)
    sp = prior.sparsity
    if isinstance(sp, FixedW):
        log_prior = sizes * math.log(sp.w) + (q - sizes) * math.log1p(-sp.w)
    else:
        log_prior = betaln(sp.a + sizes, sp.b + q - sizes) - betaln(sp.a, sp.b)
    log_post = logm + log_prior
    probs = np.exp(log_post - logsumexp(log_post))
    ppi = np.zeros(p)
    for j in range(p):
        ppi[j] = probs[(models >> j) & 1 == 1].sum()
    w_mean = None
    if isinstance(sp, BetaBinomial):
        w_mean = float(np.sum(probs * (sp.a + sizes) / (sp.a + sp.b + q)))
    return ExactPosterior(models, logm, probs, ppi, w_mean)


@dataclass(frozen=True)
class BetaDraws:
    draws: np.ndarray
    acceptance_rate: float
    mode: np.ndarray


def sample_beta_given_gamma(
    d: Dataset,
    gamma,
    fam: QuasiFamily,
    prior: PriorConfig,
    psi: float,
    n_draws: int,
    seed: int,
    metropolis: bool = True,
    evaluator: MarginalEvaluator | None = None,
) -> np.ndarray:
    """``n_draws x p`` coefficient draws for a fixed model; inactive columns are exactly 0."""
    return sample_beta_detail(d, gamma, fam, prior, psi, n_draws, seed, metropolis, evaluator).draws


def sample_beta_detail(d, gamma, fam, prior, psi, n_draws, seed, metropolis=True, evaluator=None) -> BetaDraws:
    """Gaussian draws around the MAP with the Laplace covariance.

    With ``metropolis`` the draws are used as independence proposals for a
    Metropolis-Hastings chain targeting ``exp(n Q_n) * slab``, started at
    the mode.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    if evaluator is None:
        evaluator = MarginalEvaluator(d, fam, psi, prior)
    ev = evaluator.evaluate(gamma)
    cols = ev.gamma.columns()
    out = np.zeros((n_draws, d.p))
    k = len(cols)
    if k == 0:
        return BetaDraws(out, 1.0, np.zeros(0))
    X = d.X[:, cols]
    mode = np.asarray(ev.map_beta, dtype=float)
    _, w_obs, _ = fam.kernel_derivs(d.y, X @ mode)
    M = _weighted_gram(X, w_obs) / psi + np.eye(k) / prior.slab_variance
    try:
        L = linalg.cholesky(M, lower=True, check_finite=False)
    except linalg.LinAlgError:
        _, _, w_f = fam.kernel_derivs(d.y, X @ mode)
        M = _weighted_gram(X, w_f) / psi + np.eye(k) / prior.slab_variance
        L = linalg.cholesky(M, lower=True, check_finite=False)
    rng = make_rng(seed)
    eps = rng.standard_normal((n_draws, k))
    props = mode + linalg.solve_triangular(L.T, eps.T, lower=False, check_finite=False).T
    if not metropolis:
        out[:, cols] = props
        return BetaDraws(out, 1.0, mode)

    def log_target(b):
        return float(np.sum(fam.kernel(d.y, X @ b))) / psi + log_slab_density(b, prior.slab_variance)

    def log_prop(b):
        r = L.T @ (b - mode)
        return -0.5 * float(r @ r)

    u = rng.random(n_draws)
    cur = mode
    cur_w = log_target(mode) - log_prop(mode)
    accepted = 0
    chain = np.empty((n_draws, k))
    for i in range(n_draws):
        cand = props[i]
        cand_w = log_target(cand) - log_prop(cand)
        if u[i] == 0.0 or math.log(u[i]) < cand_w - cur_w:
            cur, cur_w = cand, cand_w
            accepted += 1
        chain[i] = cur
    out[:, cols] = chain
    return BetaDraws(out, accepted / n_draws, mode)


__all__ = [
    "SamplerOutput",
    "gibbs_run",
    "enumerate_exact",
    "ExactPosterior",
    "sample_beta_given_gamma",
    "sample_beta_detail",
    "inclusion_probability",
    "make_rng",
]
