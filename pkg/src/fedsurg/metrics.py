"""Evaluation statistics: discrimination metrics, threshold metrics,
percentile-bootstrap confidence intervals, Mann-Whitney U and chi-square
tests with Bonferroni adjustment.

AUROC is rank-based (ties as half-concordant); AUPRC is average precision
with tied scores processed as one block (step integration, no trapezoids).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc, ndtr


class DegenerateLabelsError(ValueError):
    """Metric needs both classes (or at least one positive) present."""


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values receiving their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Concordant-pair fraction via rank sums, ties counted half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AUROC needs both classes")
    ranks = _midranks(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over descending unique score thresholds."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateLabelsError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ap = 0.0
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        block_tp = int(y[i:j + 1].sum())
        tp += block_tp
        fp += (j - i + 1) - block_tp
        if block_tp:
            ap += (block_tp / n_pos) * (tp / (tp + fp))
        i = j + 1
    return float(ap)


@dataclass(frozen=True)
class ThresholdMetrics:
    sensitivity: float
    specificity: float
    ppv: float | None  # None when the denominator is empty
    npv: float | None


def confusion_at_threshold(scores, labels, threshold: float) -> ThresholdMetrics:
    """Predict positive iff score >= threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    pred = s >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    tn = int((~pred & ~y).sum())
    if tp + fn == 0 or tn + fp == 0:
        raise DegenerateLabelsError("confusion metrics need both classes")
    return ThresholdMetrics(
        sensitivity=tp / (tp + fn),
        specificity=tn / (tn + fp),
        ppv=tp / (tp + fp) if (tp + fp) else None,
        npv=tn / (tn + fn) if (tn + fn) else None,
    )


def pick_threshold(scores, labels) -> float:
    """Youden's J maximizer over observed scores; ties -> lowest threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        raise DegenerateLabelsError("threshold selection needs both classes")
    best_t, best_j = None, -np.inf
    for t in np.unique(s):
        m = confusion_at_threshold(s, y, t)
        j = m.sensitivity + m.specificity - 1.0
        if j > best_j + 1e-15:
            best_t, best_j = float(t), j
    return best_t


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    ci_low: float
    ci_high: float
    n_skipped: int = 0


def bootstrap_ci(scores, labels, metric, n_boot: int = 1000, alpha: float = 0.05,
                 seed: int = 0) -> BootstrapResult:
    """Percentile bootstrap over paired (score, label) resamples.

    Each resample draws its RNG from (seed, resample index) so results do
    not depend on execution order. Resamples on which the metric is
    degenerate are redrawn up to 10 times, then skipped (count reported).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    point = float(metric(s, y))
    n = len(s)
    values = []
    skipped = 0
    for i in range(n_boot):
        rng = np.random.default_rng([seed, i])
        ok = False
        for _ in range(10):
            idx = rng.integers(0, n, size=n)
            try:
                values.append(float(metric(s[idx], y[idx])))
                ok = True
                break
            except DegenerateLabelsError:
                continue
        if not ok:
            skipped += 1
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return BootstrapResult(point, float(lo), float(hi), skipped)


def _u_statistic(ranks_a: np.ndarray, n_a: int) -> float:
    return float(ranks_a.sum() - n_a * (n_a + 1) / 2.0)


def mann_whitney_u(a, b) -> tuple[float, float]:
    """U statistic (pairs where a exceeds b, ties half) and two-sided p.

    Exact permutation enumeration when min(n_a, n_b) < 8; otherwise the
    normal approximation with tie-corrected variance and continuity
    correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be non-empty")
    n_a, n_b = len(a), len(b)
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = _u_statistic(ranks[:n_a], n_a)
    mean_u = n_a * n_b / 2.0

    if min(n_a, n_b) < 8:
        observed = abs(u - mean_u)
        hits = total = 0
        for combo in itertools.combinations(range(n_a + n_b), n_a):
            u_perm = _u_statistic(ranks[list(combo)], n_a)
            total += 1
            if abs(u_perm - mean_u) >= observed - 1e-9:
                hits += 1
        return u, hits / total

    n = n_a + n_b
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(((counts ** 3 - counts)).sum()) / (n * (n - 1))
    var_u = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var_u <= 0:
        return u, 1.0
    z = (abs(u - mean_u) - 0.5) / math.sqrt(var_u)
    p = 2.0 * float(ndtr(-max(z, 0.0)))
    return u, min(1.0, p)


def chi_square(table) -> tuple[float, float]:
    """Pearson chi-square on an R x C contingency table."""
    obs = np.asarray(table, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 2 or obs.shape[1] < 2:
        raise ValueError("table must be at least 2x2")
    row = obs.sum(axis=1)
    col = obs.sum(axis=0)
    if (row <= 0).any() or (col <= 0).any():
        raise ValueError("zero row or column margin")
    expected = np.outer(row, col) / obs.sum()
    stat = float(((obs - expected) ** 2 / expected).sum())
    dof = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    # survival function of chi-square = regularized upper incomplete gamma
    p = float(gammaincc(dof / 2.0, stat / 2.0))
    return stat, p


def bonferroni(p_values, m: int | None = None) -> list[float]:
    ps = list(p_values)
    m = len(ps) if m is None else m
    if any(p < 0 or p > 1 for p in ps):
        raise ValueError("p values must be in [0, 1]")
    return [min(1.0, p * m) for p in ps]


@dataclass
class MetricCI:
    point: float
    ci_low: float
    ci_high: float


@dataclass
class OutcomeReport:
    """Per-outcome evaluation row: discrimination plus threshold metrics."""

    outcome: str
    n_total: int
    n_positives: int
    threshold: float | None
    auroc: MetricCI
    auprc: MetricCI
    sensitivity: MetricCI | None = None
    specificity: MetricCI | None = None
    ppv: MetricCI | None = None
    npv: MetricCI | None = None
