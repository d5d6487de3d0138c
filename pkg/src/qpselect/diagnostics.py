"""Mean/variance adequacy diagnostics and variance-weighted cross-validation.

Observations are binned on a neutral index (the average of the competing
models' fitted means) so that no single model defines the bins.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Dataset, FixedDispersion, PriorConfig, RunConfig
from .errors import InsufficientSamplesError, TooFewBinsError
from .marginal import map_estimate
from .quasilik import estimate_nb_theta, pearson_dispersion
from .simbench import Method, fit_pipeline, select_both


@dataclass(frozen=True)
class PoissonVariance:
    def __call__(self, mu):
        return np.asarray(mu, dtype=float)


@dataclass(frozen=True)
class QuasiPoissonVariance:
    psi: float

    def __call__(self, mu):
        return self.psi * np.asarray(mu, dtype=float)


@dataclass(frozen=True)
class NegBinVariance:
    theta: float

    def __call__(self, mu):
        mu = np.asarray(mu, dtype=float)
        return mu + mu * mu / self.theta


@dataclass(frozen=True)
class ConstantVariance:
    psi: float

    def __call__(self, mu):
        return np.full(np.shape(mu), self.psi, dtype=float)


@dataclass(frozen=True)
class FittedModel:
    label: str
    mu: np.ndarray
    variance_rule: object
    gamma: np.ndarray | None = None


@dataclass
class BinnedDiagnostic:
    edges: np.ndarray
    bins: list
    summary: dict = field(default_factory=dict)

    def rows(self):
        for b in self.bins:
            for label, (mbar, v) in b["models"].items():
                yield {
                    "bin": b["bin"],
                    "model": label,
                    "count": b["count"],
                    "y_mean": b["y_mean"],
                    "y_var": b["y_var"],
                    "mu_mean": mbar,
                    "implied_var": v,
                }

    def write_csv(self, path):
        fields = ["bin", "model", "count", "y_mean", "y_var", "mu_mean", "implied_var"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def neutral_index(mus) -> np.ndarray:
    """Element-wise mean of fitted means, independent of the order they are given in."""
    stacked = np.sort(np.vstack([np.asarray(m, dtype=float) for m in mus]), axis=0)
    return stacked.sum(axis=0) / stacked.shape[0]


def decile_bins(index, n_bins=10):
    """Bin labels on type-7 quantile edges; tied edges merge bins."""
    edges = np.unique(np.quantile(index, np.linspace(0.0, 1.0, n_bins + 1)))
    if len(edges) == 1:
        return edges, np.zeros(len(index), dtype=int)
    labels = np.searchsorted(edges, index, side="right") - 1
    labels = np.clip(labels, 0, len(edges) - 2)
    return edges, labels


def binned_mean_variance(d, fitted_models, min_count: int = 20, min_bins: int = 3) -> BinnedDiagnostic:
    """Compare binned empirical means/variances with each model's implied ones.

    ``d`` is a :class:`Dataset` or a response vector. Bins with fewer than
    ``min_count`` observations are dropped; at least ``min_bins`` must
    survive.
    """
    y = d.y if isinstance(d, Dataset) else np.asarray(d, dtype=float)
    models = list(fitted_models)
    if not models:
        raise ValueError("need at least one fitted model")
    index = neutral_index([m.mu for m in models])
    edges, labels = decile_bins(index)
    bins = []
    for b in range(int(labels.max()) + 1):
        idx = labels == b
        count = int(idx.sum())
        if count < min_count:
            continue
        yb = y[idx]
        entry = {
            "bin": b,
            "count": count,
            "y_mean": float(yb.mean()),
            "y_var": float(yb.var(ddof=1)) if count > 1 else 0.0,
            "models": {},
        }
        for m in models:
            mbar = float(np.mean(np.asarray(m.mu)[idx]))
            entry["models"][m.label] = (mbar, float(m.variance_rule(np.array([mbar]))[0]))
        bins.append(entry)
    if len(bins) < min_bins:
        raise TooFewBinsError(f"only {len(bins)} bins have at least {min_count} observations")
    summary = {}
    for m in models:
        ybar = np.array([b["y_mean"] for b in bins])
        s2 = np.array([b["y_var"] for b in bins])
        mbar = np.array([b["models"][m.label][0] for b in bins])
        v = np.array([b["models"][m.label][1] for b in bins])
        summary[m.label] = {
            "mean_mse": float(np.mean((ybar - mbar) ** 2)),
            "mean_mae": float(np.mean(np.abs(ybar - mbar))),
            "var_mse": float(np.mean((s2 - v) ** 2)),
            "var_mae": float(np.mean(np.abs(s2 - v))),
        }
    return BinnedDiagnostic(edges, bins, summary)


def _variance_rule(method: Method, family, d, cols, beta):
    if method.kind == "poisson":
        return PoissonVariance()
    if method.kind == "negbin":
        mu = family.mean(d.X[:, cols] @ beta)
        return NegBinVariance(estimate_nb_theta(d, cols, mu))
    if isinstance(method.dispersion, FixedDispersion):
        psi = method.dispersion.value
    else:
        psi = pearson_dispersion(d, cols, beta, family)
    return ConstantVariance(psi) if family.name == "linear" else QuasiPoissonVariance(psi)


@dataclass(frozen=True)
class SelectedFit:
    model: FittedModel
    columns: list
    beta: np.ndarray
    family: object

    def predict(self, X):
        eta = X[:, self.columns] @ self.beta if self.columns else np.zeros(X.shape[0])
        mu = self.family.mean(eta)
        return mu, self.model.variance_rule(mu)


def fit_selected_model(d: Dataset, method: Method, prior: PriorConfig, run: RunConfig, rule="bfdr"):
    """Select with ``method`` then refit its MAP on the selected columns.

    The variance rule uses a dispersion (or NB theta) re-estimated on the
    selected model, unless the method fixes its dispersion.
    """
    pipe = fit_pipeline(d, method, prior, run)
    sel = select_both(pipe.output.rb_ppi, pipe.forced, run.fdr_alpha)[rule]
    cols = [int(j) for j in np.flatnonzero(sel)]
    est = map_estimate(d, cols, pipe.psi, pipe.family, prior, tol=run.newton_tol, max_iter=run.newton_max_iter)
    rule_obj = _variance_rule(method, pipe.family, d, cols, est.beta)
    eta = d.X[:, cols] @ est.beta if cols else np.zeros(d.n)
    model = FittedModel(method.label, np.asarray(pipe.family.mean(eta)), rule_obj, sel)
    return SelectedFit(model, cols, est.beta, pipe.family)


@dataclass
class WMSERow:
    method: str
    mean: float
    se: float
    folds: list

    def to_dict(self):
        return {"method": self.method, "wmse": self.mean, "se": self.se, "folds": self.folds}


def stratified_folds(y, folds: int, seed: int) -> np.ndarray:
    """Fold labels balanced along the sorted response; ties broken at random."""
    rng = np.random.default_rng(np.random.Philox(seed))
    order = np.lexsort((rng.random(len(y)), y))
    labels = np.empty(len(y), dtype=int)
    for start in range(0, len(y), folds):
        block = order[start:start + folds]
        labels[block] = rng.permutation(folds)[: len(block)]
    return labels


def cv_wmse(d: Dataset, methods, folds: int = 10, seed: int = 0, prior=None, run=None, rule="bfdr"):
    """K-fold variance-weighted held-out MSE for each method.

    Within each training fold the full pipeline runs (dispersion, Gibbs
    selection, MAP refit on the selected model); the held-out score is
    ``mean((y - mu)^2 / V)`` with ``V`` the method's own implied variance.
    """
    if d.n < folds * 5:
        raise InsufficientSamplesError(f"{folds}-fold CV needs n >= {folds * 5}, got n={d.n}")
    prior = PriorConfig() if prior is None else prior
    run = RunConfig() if run is None else run
    labels = stratified_folds(d.y, folds, seed)
    per_method = {m.label: [] for m in methods}
    for k in range(folds):
        tr = d.subset_rows(labels != k)
        te = labels == k
        fold_run = replace(run, seed=(run.seed * 1_000_003 + k) % (1 << 64))
        for m in methods:
            mu, V = fit_selected_model(tr, m, prior, fold_run, rule).predict(d.X[te])
            per_method[m.label].append(float(np.mean((d.y[te] - mu) ** 2 / V)))
    rows = []
    for m in methods:
        vals = np.array(per_method[m.label])
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan")
        rows.append(WMSERow(m.label, float(vals.mean()), se, [float(v) for v in vals]))
    return rows


def write_summary_json(path, binned: BinnedDiagnostic | None, wmse_rows=None):
    out = {}
    if binned is not None:
        out["binned"] = binned.summary
    if wmse_rows is not None:
        out["wmse"] = [r.to_dict() for r in wmse_rows]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
