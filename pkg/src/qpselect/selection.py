"""Variable selection rules on inclusion probabilities, and selection scoring."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import LengthMismatchError

MEDIAN = "median_probability"
BFDR = "bayes_fdr"


@dataclass(frozen=True)
class SelectionResult:
    selected: np.ndarray
    rule: str
    implicit_threshold: float
    ppi_used: np.ndarray
    alpha: float | None = None

    @property
    def k(self) -> int:
        return int(self.selected.sum())

    def to_dict(self, column_names=None) -> dict:
        out = {
            "rule": self.rule,
            "alpha": self.alpha,
            "implicit_threshold": self.implicit_threshold,
            "selected": [int(v) for v in self.selected],
            "ppi": [float(v) for v in self.ppi_used],
        }
        if column_names is not None:
            out["selected_columns"] = [c for c, s in zip(column_names, self.selected) if s]
        return out


def _check_ppi(ppi):
    ppi = np.asarray(ppi, dtype=float)
    if ppi.ndim != 1:
        raise LengthMismatchError("ppi must be a vector")
    if np.any((ppi < 0) | (ppi > 1)) or not np.all(np.isfinite(ppi)):
        raise ValueError("inclusion probabilities must lie in [0, 1]")
    return ppi


def select_median(ppi) -> SelectionResult:
    """Median probability model: keep every column with ``ppi >= 0.5``."""
    ppi = _check_ppi(ppi)
    return SelectionResult(ppi >= 0.5, MEDIAN, 0.5, ppi)


def select_bfdr(ppi, alpha: float = 0.05) -> SelectionResult:
    """Largest top-``k`` set whose mean inclusion probability is at least ``1 - alpha``.

    Columns are ranked by decreasing ppi with ties in index order; the
    ``k``-th ranked ppi is the implicit threshold, and every column whose ppi
    reaches it is selected. With ``k = 0`` nothing is selected.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    ppi = _check_ppi(ppi)
    order = np.argsort(-ppi, kind="stable")
    ranked = ppi[order]
    prefix_mean = np.cumsum(ranked) / np.arange(1, len(ppi) + 1)
    # relative slack absorbs summation rounding without admitting zeros as alpha -> 1
    ok = np.flatnonzero(prefix_mean >= (1.0 - alpha) * (1.0 - 1e-12))
    k = int(ok[-1]) + 1 if ok.size else 0
    if k == 0:
        return SelectionResult(np.zeros(len(ppi), dtype=bool), BFDR, math.nextafter(1.0, 2.0), ppi, alpha)
    threshold = float(ranked[k - 1])
    return SelectionResult(ppi >= threshold, BFDR, threshold, ppi, alpha)


@dataclass(frozen=True)
class SelectionMetrics:
    fdr: float
    power: float
    f1: float
    mcc: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n_selected(self) -> int:
        return self.tp + self.fp

    def to_dict(self) -> dict:
        return asdict(self)


def score_selection(selected, truth, scored_mask=None) -> SelectionMetrics:
    """FDR, power, F1 and MCC of a selection over the scored columns.

    Degenerate conventions: FDR 0 for an empty selection, power 1 when there
    are no true actives, F1 1 when there is nothing to find and nothing found,
    MCC 0 when any factor of its denominator vanishes.
    """
    selected = np.asarray(selected, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    mask = np.ones_like(truth) if scored_mask is None else np.asarray(scored_mask, dtype=bool)
    if not (selected.shape == truth.shape == mask.shape):
        raise LengthMismatchError(
            f"selected {selected.shape}, truth {truth.shape} and mask {mask.shape} differ"
        )
    s, t = selected[mask], truth[mask]
    tp = int(np.sum(s & t))
    fp = int(np.sum(s & ~t))
    fn = int(np.sum(~s & t))
    tn = int(np.sum(~s & ~t))
    fdr = fp / (tp + fp) if tp + fp else 0.0
    power = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 1.0
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(denom) if denom else 0.0
    return SelectionMetrics(fdr, power, f1, mcc, tp, fp, tn, fn)
