import itertools

import numpy as np
import pytest

from modicf import metrics as mx
from modicf.dataset import IndicatorMatrix


class _FakeBundle:
    def __init__(self, train, test=None):
        self._train = np.asarray(train, dtype=np.uint8)
        self._test = np.zeros_like(self._train) if test is None else np.asarray(test)

    def train_matrix(self):
        return self._train

    def split_mask(self, which):
        return self._test.astype(bool) if which == "test" else np.zeros_like(self._test, bool)


def brute_force_metrics(scores_row, train_row, test_row, k):
    """Definition-level evaluation for one user: scan the sorted candidate list."""
    n = len(scores_row)
    candidates = [i for i in range(n) if not train_row[i]]
    ranked = sorted(candidates, key=lambda i: (-scores_row[i], i))[:k]
    hits = [i for i in ranked if test_row[i]]
    n_pos = int(sum(test_row))
    recall = len(hits) / n_pos if n_pos else None
    precision = len(hits) / k
    dcg = sum(1.0 / np.log2(ranked.index(i) + 2) for i in hits)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(k, n_pos)))
    ndcg = dcg / idcg if idcg else 0.0
    return ranked, recall, precision, ndcg


def test_rank_topk_tie_break_low_index():
    scores = np.array([[0.5, 0.9, 0.9, 0.1]])
    bundle = _FakeBundle(np.zeros((1, 4)))
    res = mx.rank_topk(scores, bundle, 3)
    assert list(res.items[0]) == [1, 2, 0]


def test_rank_topk_full_permutation():
    scores = np.array([[0.3, 0.8, 0.5]])
    bundle = _FakeBundle(np.zeros((1, 3)))
    res = mx.rank_topk(scores, bundle, 3)
    assert sorted(res.items[0]) == [0, 1, 2]


def test_rank_topk_excludes_train_and_bounds_k():
    train = np.array([[1, 0, 0], [0, 0, 0]])
    scores = np.ones((2, 3))
    res = mx.rank_topk(scores, _FakeBundle(train), 2)
    assert 0 not in res.items[0]
    with pytest.raises(mx.MetricError):
        mx.rank_topk(scores, _FakeBundle(train), 3)


def test_rank_topk_layout_independent():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(4, 6))
    bundle = _FakeBundle(np.zeros((4, 6)))
    a = mx.rank_topk(scores, bundle, 4)
    b = mx.rank_topk(np.asfortranarray(scores), bundle, 4)
    assert np.array_equal(a.items, b.items)


def test_rank_topk_matches_sort_oracle():
    rng = np.random.default_rng(1)
    for _ in range(25):
        scores = np.round(rng.normal(size=(3, 6)), 1)  # rounded to force ties
        train = (rng.random((3, 6)) < 0.2).astype(np.uint8)
        train[:, :2] = 0  # keep enough candidates
        k = 3
        res = mx.rank_topk(scores, _FakeBundle(train), k)
        for u in range(3):
            ranked, _, _, _ = brute_force_metrics(scores[u], train[u], np.zeros(6), k)
            assert list(res.items[u]) == ranked


def test_accuracy_perfect_and_hand_ndcg():
    # single positive ranked first at K=10
    scores = np.zeros((1, 12))
    scores[0, 3] = 1.0
    test = np.zeros((1, 12))
    test[0, 3] = 1
    res = mx.rank_topk(scores, _FakeBundle(np.zeros((1, 12))), 10)
    rec, prec, ndcg = mx.accuracy_metrics(res, test)
    assert (rec, prec, ndcg) == (1.0, 0.1, 1.0)
    # single positive at rank 2 with K=2: NDCG = 1/log2(3)
    scores = np.array([[0.9, 0.8, 0.1, 0.0]])
    test = np.array([[0, 1, 0, 0]])
    res = mx.rank_topk(scores, _FakeBundle(np.zeros((1, 4))), 2)
    _, _, ndcg = mx.accuracy_metrics(res, test)
    assert ndcg == pytest.approx(1.0 / np.log2(3.0))


def test_accuracy_no_hits_zero():
    scores = np.array([[0.9, 0.8, 0.1, 0.0]])
    test = np.array([[0, 0, 0, 1]])
    res = mx.rank_topk(scores, _FakeBundle(np.zeros((1, 4))), 2)
    rec, prec, ndcg = mx.accuracy_metrics(res, test)
    assert (rec, prec, ndcg) == (0.0, 0.0, 0.0)


def test_accuracy_excludes_users_without_positives():
    scores = np.tile(np.array([0.9, 0.5, 0.1]), (2, 1))
    test = np.array([[1, 0, 0], [0, 0, 0]])
    res = mx.rank_topk(scores, _FakeBundle(np.zeros((2, 3))), 1)
    rec, prec, ndcg = mx.accuracy_metrics(res, test)
    assert rec == 1.0  # second user ignored, not averaged as zero


def test_metrics_match_bruteforce_enumeration():
    # all single-user instances: up to 6 items, up to 3 positives, every
    # permutation of distinct scores, several K values
    for n_items in (4, 5, 6):
        base_scores = np.linspace(1.0, 0.1, n_items)
        for perm in itertools.permutations(range(n_items)):
            scores = base_scores[list(perm)][None, :]
            for n_pos in (1, 2, 3):
                for pos in itertools.combinations(range(n_items), n_pos):
                    test = np.zeros((1, n_items))
                    test[0, list(pos)] = 1
                    for k in (1, 3):
                        res = mx.rank_topk(scores, _FakeBundle(np.zeros((1, n_items))), k)
                        rec, prec, ndcg = mx.accuracy_metrics(res, test)
                        ranked, brec, bprec, bndcg = brute_force_metrics(
                            scores[0], np.zeros(n_items), test[0], k)
                        assert list(res.items[0]) == ranked
                        assert rec == pytest.approx(brec, abs=1e-12)
                        assert prec == pytest.approx(bprec, abs=1e-12)
                        assert ndcg == pytest.approx(bndcg, abs=1e-12)
            if n_items == 6:
                break  # permutations of 6 explode; the first suffices with 4,5 exhaustive


def test_metrics_match_bruteforce_multiuser_random():
    rng = np.random.default_rng(9)
    for _ in range(50):
        n_users = int(rng.integers(2, 5))
        n_items = int(rng.integers(4, 7))
        scores = np.round(rng.normal(size=(n_users, n_items)), 1)
        test = (rng.random((n_users, n_items)) < 0.3).astype(int)
        test[test.sum(axis=1) == 0, 0] = 1  # every user gets a positive
        while test.sum(axis=1).max() > 3:
            u = int(np.argmax(test.sum(axis=1)))
            test[u, np.flatnonzero(test[u])[-1]] = 0
            test[test.sum(axis=1) == 0, 0] = 1
        k = 3
        res = mx.rank_topk(scores, _FakeBundle(np.zeros((n_users, n_items))), k)
        rec, prec, ndcg = mx.accuracy_metrics(res, test)
        rs, ps, ns = [], [], []
        for u in range(n_users):
            _, r, p, n = brute_force_metrics(scores[u], np.zeros(n_items), test[u], k)
            rs.append(r), ps.append(p), ns.append(n)
        assert rec == pytest.approx(np.mean(rs), abs=1e-12)
        assert prec == pytest.approx(np.mean(ps), abs=1e-12)
        assert ndcg == pytest.approx(np.mean(ns), abs=1e-12)


def test_ndcg_invariant_under_monotone_transform():
    rng = np.random.default_rng(5)
    scores = rng.normal(size=(3, 6))
    test = (rng.random((3, 6)) < 0.4).astype(int)
    test[:, 0] = 1
    bundle = _FakeBundle(np.zeros((3, 6)))
    base = mx.accuracy_metrics(mx.rank_topk(scores, bundle, 3), test)
    warped = mx.accuracy_metrics(mx.rank_topk(np.exp(2 * scores) + 5, bundle, 3), test)
    assert base == warped


def _indicator(flags):
    """flags: list of 0/1 per item; 0 marks an incomplete item."""
    entries = np.ones((len(flags), 2), dtype=np.uint8)
    for i, ok in enumerate(flags):
        if not ok:
            entries[i, 1] = 0
    return IndicatorMatrix(entries)


def test_fairness_hand_cases():
    res = mx.RankingResult(k=5, items=np.array([[0, 1, 2, 3, 4]]), scores=np.zeros((1, 5)))
    ind = _indicator([0, 0, 1, 1, 1, 0, 0, 0, 1, 1])  # P_d = 0.5
    # P_r = 2/5 = 0.4, P_d = 0.5 -> F = 1 - 0.1/0.5 = 0.8
    assert mx.fairness_f(res, ind) == pytest.approx(0.8)
    assert mx.fairness_f(res, ind, p_d=0.4) == pytest.approx(1.0)  # P_r == P_d
    # direct arithmetic cases from the definition
    assert 1 - abs(0.2 - 0.4) / 0.4 == pytest.approx(0.5)
    assert mx.fairness_f(res, ind, p_d=0.8) == pytest.approx(0.5)  # |0.4-0.8|/0.8
    # over-exposure can push F negative
    ind_all = _indicator([0, 0, 0, 0, 0, 1, 1, 1, 1, 1])
    res_all_inc = mx.RankingResult(k=5, items=np.array([[0, 1, 2, 3, 4]]),
                                   scores=np.zeros((1, 5)))
    f = mx.fairness_f(res_all_inc, ind_all)  # P_r=1.0, P_d=0.5
    assert f == pytest.approx(0.0)
    f2 = mx.fairness_f(res_all_inc, ind_all, p_d=0.4)  # P_r=1.0 -> 1 - 0.6/0.4
    assert f2 == pytest.approx(-0.5)


def test_fairness_undefined_without_incomplete_items():
    res = mx.RankingResult(k=2, items=np.array([[0, 1]]), scores=np.zeros((1, 2)))
    ind = IndicatorMatrix(np.ones((4, 2), dtype=np.uint8))
    assert mx.fairness_f(res, ind) is None


def test_f_fuse_cases():
    assert mx.fairness_f_fuse(0.7, 0.7) == pytest.approx(0.7)
    assert mx.fairness_f_fuse(1.0, 0.0) == 0.0
    assert mx.fairness_f_fuse(0.9, 0.0046) == pytest.approx(2 * 0.9 * 0.0046 / 0.9046)
    assert mx.fairness_f_fuse(-0.3, 0.5) == 0.0  # clamped to 0 before fusing
    assert mx.fairness_f_fuse(None, 0.5) is None


def test_exposure_counts_and_suppression():
    items = np.array([[0, 1], [0, 2], [0, 1]])
    res = mx.RankingResult(k=2, items=items, scores=np.zeros((3, 2)))
    ind = _indicator([1, 0, 1])
    exp = mx.exposure_counts(res, ind)
    assert list(exp["per_item"]) == [3, 2, 1]
    assert exp["incomplete_total"] == 2
    assert exp["complete_total"] == 4
    assert mx.suppressed_items(exp["per_item"], exp["per_item"]) == 0
    assert mx.suppressed_items([1, 0, 1], [3, 2, 1]) == 2


def test_paired_ttest_cases():
    t, sig = mx.paired_ttest([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert t == 0.0 and sig is False
    t, sig = mx.paired_ttest([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
    assert t == np.inf and sig is None
    t, sig = mx.paired_ttest([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert t == pytest.approx(2 * np.sqrt(3.0))
    assert sig is False  # 3.464 < 4.303 at df=2


def test_paired_ttest_matches_scipy():
    from scipy import stats
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(3, 12))
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        t, sig = mx.paired_ttest(a, b)
        t_ref, p_ref = stats.ttest_rel(a, b)
        assert t == pytest.approx(t_ref, rel=1e-9)
        assert sig == (p_ref < 0.05)


def test_critical_values_match_scipy():
    from scipy import stats
    for df, crit in mx.T_CRIT_5PCT.items():
        assert crit == pytest.approx(stats.t.ppf(0.975, df), abs=5e-4)
