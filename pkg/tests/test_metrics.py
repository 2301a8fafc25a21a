import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from prunekit import damage as dmg
from prunekit.metrics import (
    MetricError,
    evaluate_scores,
    pearson,
    roc_auc,
    tpr_at_fpr,
    v_shape_stats,
)


def auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def tpr_oracle(scores, labels, target):
    """Scan every candidate threshold (each distinct score, plus +inf)."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    n_pos, n_neg = (labels == 1).sum(), (labels == 0).sum()
    best = 0.0
    for t in list(np.unique(scores)) + [np.inf]:
        flagged = scores >= t
        fpr = (flagged & (labels == 0)).sum() / n_neg
        if fpr <= target:
            best = max(best, (flagged & (labels == 1)).sum() / n_pos)
    return best


def _instance(rng):
    n = int(rng.integers(2, 40))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 8, n) / 7.0 if rng.random() < 0.5 else rng.random(n)
    return scores, labels


class TestAuc:
    def test_perfect(self):
        assert roc_auc([0.1, 0.9], [0, 1]) == 1.0

    def test_all_tied(self):
        assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_worked_example(self):
        assert roc_auc([0.2, 0.8, 0.5, 0.5], [0, 1, 1, 0]) == 0.875

    def test_single_class(self):
        with pytest.raises(MetricError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_bad_labels(self):
        with pytest.raises(MetricError):
            roc_auc([0.1, 0.2], [0, 2])

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s, y = _instance(rng)
            assert abs(roc_auc(s, y) - auc_oracle(s, y)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(-500, 500), min_size=4, max_size=30), st.integers(0, 2**31))
    def test_monotone_invariance(self, scores, seed):
        labels = np.random.default_rng(seed).integers(0, 2, len(scores))
        assume(0 < labels.sum() < len(labels))
        s = np.array(scores) / 100.0  # grid keeps the transform strictly monotone in floating point
        assert roc_auc(s, labels) == pytest.approx(roc_auc(np.exp(s) * 3 + 1, labels), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31))
    def test_complement(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.random(25)
        y = rng.integers(0, 2, 25)
        assume(0 < y.sum() < 25)
        assert roc_auc(s, y) + roc_auc(-s, y) == pytest.approx(1.0, abs=1e-12)


class TestTprAtFpr:
    def test_perfect_separation(self):
        for target in (1e-3, 0.1, 0.5):
            assert tpr_at_fpr([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], target) == 1.0

    def test_hundred_negatives_admit_none(self):
        rng = np.random.default_rng(0)
        neg = rng.random(100)
        pos = np.array([neg.max() + 1, neg.max() - 1e-9, 0.5])
        s = np.r_[neg, pos]
        y = np.r_[np.zeros(100), np.ones(3)]
        assert tpr_at_fpr(s, y, 0.001) == pytest.approx(1 / 3)

    def test_tie_group_crossing_target_excluded(self):
        # the top group mixes a negative with positives, so only "flag nothing" qualifies
        assert tpr_at_fpr([0.9, 0.9, 0.9, 0.1], [1, 1, 0, 0], 0.1) == 0.0

    def test_matches_threshold_scan(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            s, y = _instance(rng)
            target = float(rng.choice([1e-3, 0.05, 0.2, 0.5]))
            assert abs(tpr_at_fpr(s, y, target) - tpr_oracle(s, y, target)) <= 1e-12

    def test_bad_target(self):
        with pytest.raises(MetricError):
            tpr_at_fpr([0.1, 0.9], [0, 1], 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.001, 0.5), st.floats(0.001, 0.5))
    def test_nondecreasing_in_target(self, seed, a, b):
        rng = np.random.default_rng(seed)
        s, y = rng.random(40), rng.integers(0, 2, 40)
        assume(0 < y.sum() < 40)
        lo, hi = sorted((a, b))
        assert tpr_at_fpr(s, y, lo) <= tpr_at_fpr(s, y, hi)


class TestPearson:
    def test_linear(self):
        x = np.arange(10.0)
        assert pearson(x, 2 * x + 1) == pytest.approx(1.0)
        assert pearson(x, -x) == pytest.approx(-1.0)

    def test_direct_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x, y = rng.normal(size=12), rng.normal(size=12)
            n = x.size
            num = n * np.sum(x * y) - x.sum() * y.sum()
            den = np.sqrt(n * np.sum(x * x) - x.sum() ** 2) * np.sqrt(n * np.sum(y * y) - y.sum() ** 2)
            assert abs(pearson(x, y) - num / den) <= 1e-12

    def test_degenerate_zero(self):
        assert pearson([1, 2, 3], [5, 5, 5]) == 0.0

    def test_errors(self):
        with pytest.raises(MetricError):
            pearson([1, 2, 3], [1, 2])
        with pytest.raises(MetricError):
            pearson([1, 2], [1, 2])


def _report(mean, sd):
    mean, sd = np.asarray(mean, float), np.asarray(sd, float)
    return dmg.DamageReport("obd", [mean[None]], mean=[mean[None]], sd=[sd[None]])


class TestVShape:
    def test_symmetric_v(self):
        v = np.array([1.0, 2.0, 3.0])
        stats = v_shape_stats(_report(np.r_[v, -v], np.r_[v, v]))
        assert stats.corr_raw == pytest.approx(0.0, abs=1e-12)
        assert stats.corr_abs == pytest.approx(1.0)
        assert stats.fraction_nonneg_mean == 0.5

    def test_constant_sd_degenerate(self):
        stats = v_shape_stats(_report([1.0, -2.0, 3.0], [1.0, 1.0, 1.0]))
        assert stats.corr_raw == stats.corr_abs == 0.0 and stats.degenerate

    def test_sign_flip_invariance(self):
        rng = np.random.default_rng(0)
        m, s = rng.normal(size=50), rng.random(50)
        assert v_shape_stats(_report(m, s)).corr_abs == v_shape_stats(_report(-m, s)).corr_abs

    def test_requires_stats(self):
        with pytest.raises(MetricError):
            v_shape_stats(dmg.DamageReport("magnitude", [np.ones((1, 5))]))

    def test_too_few(self):
        with pytest.raises(MetricError):
            v_shape_stats(_report([1.0, 2.0], [1.0, 3.0]))


def test_evaluate_scores_record():
    rec = evaluate_scores([0.2, 0.8, 0.6, 0.4], [0, 1, 1, 0], [0.1, 0.2, 0.3, 0.4])
    assert rec.auc == 1.0 and rec.accuracy == 1.0 and rec.n == 4
    assert rec.mean_loss == pytest.approx(0.25) and rec.target_fpr == 1e-3
