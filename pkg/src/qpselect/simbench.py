"""Simulation scenarios, method runners, replicate orchestration and the nested-model statistic."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .core import Dataset, PriorConfig, RunConfig
from .errors import InputError, NotNestedError, QPSelectError
from .families import LinearIdentity, NegBinLog, PoissonLog, QuasiFamily, family_from_name
from .marginal import MarginalEvaluator, ModelCache
from .quasilik import columns_of, estimate_dispersion, estimate_nb_theta, fit_qmle
from .sampler import gibbs_run, make_rng
from .selection import score_selection, select_bfdr, select_median

logger = logging.getLogger(__name__)

COUNTS = "counts"
HEAVY = "heavy_tails"
INLIERS = "inliers"
SCENARIOS = (COUNTS, HEAVY, INLIERS)

_DEFAULTS = {
    COUNTS: dict(p=20, psi_star=5.5, nu=None),
    HEAVY: dict(p=20, psi_star=1.0, nu=3.0),
    INLIERS: dict(p=51, psi_star=1.0 / 40.0, nu=None),
}


def _default_beta(kind, p):
    beta = np.zeros(p)
    if kind == COUNTS:
        beta[[0, 6, 8, 9]] = [3.5, 1.5, -0.3, 0.3]
    elif kind == HEAVY:
        beta[:4] = [0.3, 0.6, -0.6, 0.3]
    elif kind == INLIERS:
        beta[1:5] = 0.1
    return beta


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    n: int
    replicate_seed: int = 0
    beta_star: tuple | None = None
    psi_star: float | None = None
    nu: float | None = None

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise InputError(f"unknown scenario {self.kind!r}; expected one of {SCENARIOS}")
        if self.n < 1:
            raise InputError("scenario n must be positive")
        dflt = _DEFAULTS[self.kind]
        if self.beta_star is None:
            object.__setattr__(self, "beta_star", tuple(_default_beta(self.kind, dflt["p"])))
        if self.psi_star is None:
            object.__setattr__(self, "psi_star", dflt["psi_star"])
        if self.nu is None:
            object.__setattr__(self, "nu", dflt["nu"])

    @property
    def p(self) -> int:
        return len(self.beta_star)

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.beta_star, dtype=float)

    @property
    def truth(self) -> np.ndarray:
        return self.beta != 0

    @property
    def family(self) -> QuasiFamily:
        return PoissonLog() if self.kind == COUNTS else LinearIdentity()


def _gaussian_design(n, p, rng):
    X = np.empty((n, p))
    X[:, 0] = 1.0
    X[:, 1:] = rng.standard_normal((n, p - 1))
    return X


def _names(p):
    return ("intercept",) + tuple(f"x{j}" for j in range(1, p))


def gen_counts(spec: ScenarioSpec, rng: np.random.Generator) -> Dataset:
    """Overdispersed counts: rounded Gamma draws with mean ``mu`` and variance ``psi * mu``."""
    if spec.kind != COUNTS:
        raise InputError(f"gen_counts needs the {COUNTS!r} scenario")
    X = _gaussian_design(spec.n, spec.p, rng)
    mu = np.exp(X @ spec.beta)
    ystar = rng.gamma(shape=mu / spec.psi_star, scale=spec.psi_star)
    y = np.floor(ystar + 0.5)
    return Dataset(y, X, _names(spec.p))


def gen_heavy_tails(spec: ScenarioSpec, rng: np.random.Generator) -> Dataset:
    """Linear mean with Student-t errors scaled to variance ``psi``; ``nu = inf`` gives Gaussian errors."""
    if spec.kind != HEAVY:
        raise InputError(f"gen_heavy_tails needs the {HEAVY!r} scenario")
    nu = spec.nu
    if not nu > 2:
        raise InputError(f"heavy-tail scenario needs nu > 2, got {nu}")
    X = _gaussian_design(spec.n, spec.p, rng)
    mu = X @ spec.beta
    if math.isinf(nu):
        y = mu + math.sqrt(spec.psi_star) * rng.standard_normal(spec.n)
    else:
        scale = math.sqrt((nu - 2.0) / nu * spec.psi_star)
        y = mu + scale * rng.standard_t(nu, size=spec.n)
    return Dataset(y, X, _names(spec.p))


def gen_inliers(spec: ScenarioSpec, rng: np.random.Generator) -> Dataset:
    """Half the rows have Gaussian covariates and noise variance ``2 psi``;
    the rest have all-zero covariates and are observed without error."""
    if spec.kind != INLIERS:
        raise InputError(f"gen_inliers needs the {INLIERS!r} scenario")
    n, p = spec.n, spec.p
    inlier = rng.random(n) < 0.5
    X = _gaussian_design(n, p, rng)
    X[inlier, 1:] = 0.0
    mu = X @ spec.beta
    noise = math.sqrt(2.0 * spec.psi_star) * rng.standard_normal(n)
    y = np.where(inlier, mu, mu + noise)
    return Dataset(y, X, _names(p))


_GENERATORS = {COUNTS: gen_counts, HEAVY: gen_heavy_tails, INLIERS: gen_inliers}


def generate(spec: ScenarioSpec) -> Dataset:
    return _GENERATORS[spec.kind](spec, make_rng(spec.replicate_seed))


def derive_seed(base_seed: int, *parts) -> int:
    """``base_seed`` XOR a stable 64-bit hash of ``parts``."""
    h = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8)
    return (int(base_seed) ^ int.from_bytes(h.digest(), "little")) % (1 << 64)


@dataclass(frozen=True)
class Method:
    """``kind`` is ``qp``, ``poisson`` or ``negbin``; ``family`` applies to ``qp`` only."""

    label: str
    kind: str
    family: str = "poisson"
    dispersion: object = None

    @classmethod
    def qp(cls, family="poisson", dispersion=None, label="QP"):
        return cls(label, "qp", family, dispersion)

    @classmethod
    def poisson(cls):
        return cls("Poisson", "poisson")

    @classmethod
    def negbin(cls):
        return cls("NB", "negbin")


def method_from_name(name: str, scenario_family: str = "poisson") -> Method:
    from .core import L1Regularized

    key = name.lower()
    if key == "qp":
        return Method.qp(scenario_family)
    if key in ("qp-lasso", "qp_lasso"):
        return Method.qp(scenario_family, L1Regularized(), label="QP-lasso")
    if key in ("poisson", "pois"):
        return Method.poisson()
    if key in ("nb", "negbin"):
        return Method.negbin()
    raise InputError(f"unknown method {name!r}; expected qp, qp-lasso, poisson or nb")


@dataclass
class ReplicateReport:
    scenario: str
    n: int
    replicate: int
    method: str
    psi: float
    theta: float | None
    rb_ppi: np.ndarray
    selected: dict
    metrics: dict
    cache_stats: dict
    visited_models: int
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "n": self.n,
            "replicate": self.replicate,
            "method": self.method,
            "status": self.status,
            "error": self.error,
            "psi": self.psi,
            "theta": self.theta,
            "rb_ppi": [float(v) for v in self.rb_ppi],
            "selected": {k: [int(b) for b in v] for k, v in self.selected.items()},
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "cache_stats": self.cache_stats,
            "visited_models": self.visited_models,
        }


@dataclass(frozen=True)
class FittedPipeline:
    """What one method run produced on one dataset."""

    family: QuasiFamily
    psi: float
    theta: float | None
    output: object
    evaluator: MarginalEvaluator
    forced: tuple


def resolve_family(d: Dataset, method: Method, run: RunConfig):
    """Family, dispersion and (for NB) theta used by ``method`` on ``d``."""
    if method.kind == "qp":
        fam = family_from_name(method.family)
        mode = method.dispersion if method.dispersion is not None else run.dispersion_mode
        if isinstance(fam, (PoissonLog, NegBinLog)):
            _require_counts(d)
        psi = estimate_dispersion(d, fam, mode, run.forced_columns(d), run.seed)
        return fam, psi, None
    _require_counts(d)
    if method.kind == "poisson":
        return PoissonLog(), 1.0, None
    if method.kind == "negbin":
        theta = estimate_nb_theta(d)
        return NegBinLog(theta), 1.0, theta
    raise InputError(f"unknown method kind {method.kind!r}")


def _require_counts(d):
    if np.any(d.y < 0) or np.any(d.y != np.round(d.y)):
        raise InputError("count methods need non-negative integer responses")


def fit_pipeline(d: Dataset, method: Method, prior: PriorConfig, run: RunConfig) -> FittedPipeline:
    fam, psi, theta = resolve_family(d, method, run)
    ev = MarginalEvaluator(d, fam, psi, prior, ModelCache(run.cache_cap), run.newton_tol, run.newton_max_iter)
    out = gibbs_run(d, fam, prior, run, psi, ev)
    return FittedPipeline(fam, psi, theta, out, ev, run.forced_columns(d))


def select_both(ppi, forced, alpha):
    """Apply both rules to the free columns; forced columns are always selected."""
    ppi = np.asarray(ppi, dtype=float)
    free = np.ones(len(ppi), dtype=bool)
    free[list(forced)] = False
    out = {}
    for name, res in (("median", select_median(ppi[free])), ("bfdr", select_bfdr(ppi[free], alpha))):
        sel = np.ones(len(ppi), dtype=bool)
        sel[free] = res.selected
        out[name] = sel
    return out


def run_method(
    d: Dataset,
    method: Method,
    prior: PriorConfig,
    run: RunConfig,
    truth=None,
    scenario: str = "",
    replicate: int = 0,
) -> ReplicateReport:
    """One method on one dataset: dispersion, Gibbs run, both selection rules, metrics."""
    t0 = time.perf_counter()
    fit = fit_pipeline(d, method, prior, run)
    out = fit.output
    selected = select_both(out.rb_ppi, fit.forced, run.fdr_alpha)
    metrics = {}
    if truth is not None:
        mask = np.ones(d.p, dtype=bool)
        mask[list(fit.forced)] = False
        metrics = {k: score_selection(v, truth, mask) for k, v in selected.items()}
    return ReplicateReport(
        scenario=scenario,
        n=d.n,
        replicate=replicate,
        method=method.label,
        psi=fit.psi,
        theta=fit.theta,
        rb_ppi=out.rb_ppi,
        selected=selected,
        metrics=metrics,
        cache_stats=out.cache_stats,
        visited_models=out.visited_models,
        wall_time=time.perf_counter() - t0,
    )


def _failed(spec, rep, method, exc):
    return ReplicateReport(
        scenario=spec.kind, n=spec.n, replicate=rep, method=method.label, psi=float("nan"),
        theta=None, rb_ppi=np.full(spec.p, np.nan), selected={}, metrics={}, cache_stats={},
        visited_models=0, status="failed", error=f"{type(exc).__name__}: {exc}",
    )


def _run_task(args):
    kind, n, rep, methods, prior, run, base_seed = args
    seed = derive_seed(base_seed, kind, n, rep)
    spec = ScenarioSpec(kind, n, seed)
    d = generate(spec)
    chain_run = replace(run, seed=derive_seed(seed, "chain"))
    reports = []
    for m in methods:
        try:
            reports.append(run_method(d, m, prior, chain_run, spec.truth, kind, rep))
        except (QPSelectError, linalg.LinAlgError, FloatingPointError) as exc:
            logger.warning("replicate %s n=%d rep=%d method=%s failed: %s", kind, n, rep, m.label, exc)
            reports.append(_failed(spec, rep, m, exc))
    return reports


METRICS = ("fdr", "power", "f1", "mcc", "n_selected")
RULES = ("bfdr", "median")


@dataclass
class GridResult:
    reports: list
    table: list = field(default_factory=list)

    def write_table(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "n", "method", "rule", "metric", "mean", "se", "R"])
            for row in self.table:
                w.writerow([row["scenario"], row["n"], row["method"], row["rule"], row["metric"],
                            repr(row["mean"]), repr(row["se"]), row["R"]])

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.reports:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    def cell(self, scenario, n, method, rule, metric):
        for row in self.table:
            if (row["scenario"], row["n"], row["method"], row["rule"], row["metric"]) == (
                scenario, n, method, rule, metric,
            ):
                return row
        raise KeyError((scenario, n, method, rule, metric))


def mean_se(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def aggregate(reports) -> list:
    """Mean and standard error per (scenario, n, method, rule, metric) over successful replicates."""
    keys = []
    groups: dict = {}
    for r in reports:
        if r.status != "ok" or not r.metrics:
            continue
        key = (r.scenario, r.n, r.method)
        if key not in groups:
            keys.append(key)
            groups[key] = []
        groups[key].append(r)
    table = []
    for key in keys:
        reps = groups[key]
        for rule in RULES:
            for metric in METRICS:
                vals = [getattr(r.metrics[rule], metric) for r in reps]
                m, se = mean_se(vals)
                table.append(dict(scenario=key[0], n=key[1], method=key[2], rule=rule,
                                  metric=metric, mean=m, se=se, R=len(vals)))
    return table


def run_scenario_grid(
    kinds,
    n_grid,
    R: int,
    methods,
    prior: PriorConfig | None = None,
    run: RunConfig | None = None,
    base_seed: int = 0,
    jobs: int = 1,
) -> GridResult:
    """Every (scenario, n, replicate) cell, each running all ``methods`` on the same data."""
    prior = PriorConfig() if prior is None else prior
    run = RunConfig() if run is None else run
    tasks = [(k, n, rep, tuple(methods), prior, run, base_seed)
             for k in kinds for n in n_grid for rep in range(R)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            nested = list(pool.map(_run_task, tasks))
    else:
        nested = [_run_task(t) for t in tasks]
    reports = [r for group in nested for r in group]
    return GridResult(reports, aggregate(reports))


def nested_bf_statistic(d: Dataset, gamma, gamma_star, fam: QuasiFamily, psi: float) -> float:
    """``2 n (Q_n(gamma) - Q_n(gamma*))`` at the prior-free quasi-likelihood maximisers."""
    cols = set(columns_of(gamma))
    cols_star = set(columns_of(gamma_star))
    if not cols_star <= cols:
        raise NotNestedError(f"{sorted(cols_star)} is not a subset of {sorted(cols)}")
    if cols == cols_star:
        return 0.0
    big = fit_qmle(d, sorted(cols), fam, psi)
    small = fit_qmle(d, sorted(cols_star), fam, psi)
    return 2.0 * (big.objective - small.objective)


__all__ = [
    "ScenarioSpec",
    "gen_counts",
    "gen_heavy_tails",
    "gen_inliers",
    "generate",
    "Method",
    "method_from_name",
    "run_method",
    "run_scenario_grid",
    "nested_bf_statistic",
    "derive_seed",
]
