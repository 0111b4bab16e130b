"""Metric implementations against brute-force oracles.

The oracles count pairs and enumerate thresholds directly, with no rank
arithmetic, so they share no code path with the implementations.
"""

import numpy as np
import pytest
from scipy import stats

from fedsurg import metrics


def _cases(n_cases=1000, max_n=50, seed=20260826):
    rng = np.random.default_rng(seed)
    for i in range(n_cases):
        n = int(rng.integers(2, max_n + 1))
        # coarse grid scores to force plenty of ties
        scores = rng.choice(np.linspace(0, 1, 7), size=n)
        labels = rng.integers(0, 2, n).astype(float)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        yield i, scores, labels


def _auroc_oracle(scores, labels):
    # [DERIVED] explicit positive/negative pair counting; ties score half
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def _auprc_oracle(scores, labels):
    # [DERIVED] average precision summed over descending unique thresholds
    n_pos = labels.sum()
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        pred = scores >= t
        tp = float((pred & (labels == 1)).sum())
        precision = tp / pred.sum()
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def test_auroc_matches_pair_counting_oracle():
    for i, scores, labels in _cases():
        got = metrics.auroc(scores, labels)
        want = _auroc_oracle(scores, labels)
        assert abs(got - want) < 1e-12, f"case {i}"


def test_auprc_matches_threshold_enumeration_oracle():
    for i, scores, labels in _cases():
        got = metrics.auprc(scores, labels)
        want = _auprc_oracle(scores, labels)
        assert abs(got - want) < 1e-12, f"case {i}"


def test_auroc_perfect_and_inverted():
    assert metrics.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert metrics.auroc([0.5, 0.5], [0, 1]) == 0.5


def test_degenerate_labels_raise():
    with pytest.raises(metrics.DegenerateLabelsError):
        metrics.auroc([0.1, 0.2], [1, 1])
    with pytest.raises(metrics.DegenerateLabelsError):
        metrics.auprc([0.1, 0.2], [0, 0])
    with pytest.raises(metrics.DegenerateLabelsError):
        metrics.pick_threshold([0.1, 0.2], [1, 1])


def test_confusion_at_threshold_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(4, 40))
        s = rng.choice(np.linspace(0, 1, 5), size=n)
        y = rng.integers(0, 2, n)
        if y.sum() in (0, n):
            y[0] = 1 - y[0]
        t = float(rng.choice(s))
        m = metrics.confusion_at_threshold(s, y, t)
        pred = s >= t
        tp = ((pred == 1) & (y == 1)).sum()
        tn = ((pred == 0) & (y == 0)).sum()
        assert m.sensitivity == pytest.approx(tp / y.sum(), abs=1e-12)
        assert m.specificity == pytest.approx(tn / (n - y.sum()), abs=1e-12)
        if pred.sum():
            assert m.ppv == pytest.approx(tp / pred.sum(), abs=1e-12)
        else:
            assert m.ppv is None


def test_pick_threshold_maximizes_youden_lowest_tie():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(4, 30))
        s = rng.choice(np.linspace(0, 1, 4), size=n)
        y = rng.integers(0, 2, n)
        if y.sum() in (0, n):
            y[0] = 1 - y[0]
        t = metrics.pick_threshold(s, y)
        # [DERIVED] exhaustive search over observed scores
        best = max(
            (metrics.confusion_at_threshold(s, y, c).sensitivity
             + metrics.confusion_at_threshold(s, y, c).specificity - 1.0, -c)
            for c in np.unique(s))
        got_m = metrics.confusion_at_threshold(s, y, t)
        got_j = got_m.sensitivity + got_m.specificity - 1.0
        assert got_j == pytest.approx(best[0], abs=1e-12)
        assert t == pytest.approx(-best[1], abs=0)  # lowest among ties


# --- Mann-Whitney ---------------------------------------------------------

def _mw_exact_oracle(a, b):
    # [DERIVED] independent full enumeration over group assignments
    import itertools
    pooled = np.concatenate([a, b])
    n_a = len(a)

    def u_of(group_idx):
        sel = pooled[list(group_idx)]
        rest = np.delete(pooled, list(group_idx))
        u = 0.0
        for x in sel:
            for v in rest:
                u += 1.0 if x > v else (0.5 if x == v else 0.0)
        return u

    observed = u_of(range(n_a))
    m = n_a * (len(pooled) - n_a) / 2.0
    hits = total = 0
    for combo in itertools.combinations(range(len(pooled)), n_a):
        total += 1
        if abs(u_of(combo) - m) >= abs(observed - m) - 1e-9:
            hits += 1
    return observed, hits / total


def test_mann_whitney_exact_small_samples():
    rng = np.random.default_rng(2)
    for trial in range(30):
        n_a = int(rng.integers(2, 6))
        n_b = int(rng.integers(2, 8))
        a = rng.choice([0.0, 0.5, 1.0, 2.0], size=n_a)
        b = rng.choice([0.0, 0.5, 1.0, 2.0], size=n_b)
        u, p = metrics.mann_whitney_u(a, b)
        u_want, p_want = _mw_exact_oracle(a, b)
        assert u == pytest.approx(u_want, abs=1e-12), f"trial {trial}"
        assert p == pytest.approx(p_want, abs=1e-12), f"trial {trial}"


def test_mann_whitney_exact_matches_scipy_without_ties():
    rng = np.random.default_rng(3)
    a = rng.normal(0, 1, 5)
    b = rng.normal(0.5, 1, 7)
    u, p = metrics.mann_whitney_u(a, b)
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="exact")
    assert u == pytest.approx(float(ref.statistic), abs=1e-12)
    assert p == pytest.approx(float(ref.pvalue), abs=1e-12)


def test_mann_whitney_normal_approx_matches_scipy():
    rng = np.random.default_rng(4)
    a = rng.choice(np.linspace(0, 1, 9), size=40)
    b = rng.choice(np.linspace(0.1, 1.1, 9), size=55)
    u, p = metrics.mann_whitney_u(a, b)
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic")
    assert u == pytest.approx(float(ref.statistic), abs=1e-9)
    assert p == pytest.approx(float(ref.pvalue), rel=1e-9)


def test_mann_whitney_empty_raises():
    with pytest.raises(ValueError):
        metrics.mann_whitney_u([], [1.0])


# --- chi-square -----------------------------------------------------------

def test_chi_square_hand_value():
    # [DERIVED] margins 30/30 and 30/30; expected 15 everywhere;
    # stat = 4 * 25/15 = 20/3
    stat, p = metrics.chi_square([[10, 20], [20, 10]])
    assert stat == pytest.approx(20.0 / 3.0, abs=1e-10)
    assert stat == pytest.approx(6.6667, abs=1e-4)
    ref = stats.chi2_contingency([[10, 20], [20, 10]], correction=False)
    assert p == pytest.approx(float(ref.pvalue), rel=1e-12)


def test_chi_square_matches_scipy_random_tables():
    rng = np.random.default_rng(6)
    for _ in range(100):
        r, c = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        table = rng.integers(1, 60, (r, c))
        stat, p = metrics.chi_square(table)
        ref = stats.chi2_contingency(table, correction=False)
        assert stat == pytest.approx(float(ref.statistic), rel=1e-12)
        assert p == pytest.approx(float(ref.pvalue), rel=1e-10, abs=1e-300)


def test_chi_square_rejects_bad_tables():
    with pytest.raises(ValueError):
        metrics.chi_square([[1, 2, 3]])
    with pytest.raises(ValueError):
        metrics.chi_square([[0, 0], [1, 2]])


def test_bonferroni():
    assert metrics.bonferroni([0.01, 0.2, 0.5]) == pytest.approx(
        [0.03, 0.6, 1.0], abs=1e-15)
    assert metrics.bonferroni([0.02], m=10) == [0.2]
    with pytest.raises(ValueError):
        metrics.bonferroni([1.5])


# --- bootstrap ------------------------------------------------------------

def test_bootstrap_point_estimate_and_determinism():
    rng = np.random.default_rng(9)
    s = rng.uniform(0, 1, 200)
    y = (rng.uniform(0, 1, 200) < s).astype(float)
    r1 = metrics.bootstrap_ci(s, y, metrics.auroc, n_boot=100, seed=42)
    r2 = metrics.bootstrap_ci(s, y, metrics.auroc, n_boot=100, seed=42)
    assert r1 == r2
    assert r1.point == pytest.approx(metrics.auroc(s, y), abs=0)
    assert r1.ci_low <= r1.point <= r1.ci_high
    r3 = metrics.bootstrap_ci(s, y, metrics.auroc, n_boot=100, seed=43)
    assert r3 != r1


def test_bootstrap_redraws_degenerate_resamples():
    # one positive in a tiny sample: many resamples are all-negative
    s = np.array([0.9, 0.1, 0.2, 0.15])
    y = np.array([1.0, 0.0, 0.0, 0.0])
    r = metrics.bootstrap_ci(s, y, metrics.auroc, n_boot=200, seed=0)
    assert np.isfinite(r.ci_low) and np.isfinite(r.ci_high)
    assert 0 <= r.n_skipped < 200
