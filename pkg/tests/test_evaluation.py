import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgnm.evaluation import evaluate, group_by_user, ndcg_at_k, rank_items, recall_at_k, score_all

from oracles import brute_force_metrics


def test_score_all_matches_pairwise_dot_products():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(9, 3))  # 5 users, 4 items
    s = score_all(e, np.arange(5), 5)
    for u in range(5):
        for i in range(4):
            assert abs(s[u, i] - sum(e[u, k] * e[5 + i, k] for k in range(3))) < 1e-12


def test_identical_embeddings_score_squared_norm():
    v = np.array([[1.0, 2.0, -2.0]])
    assert score_all(np.vstack([v, v]), [0], 1)[0, 0] == 9.0


def test_masked_items_never_ranked():
    rng = np.random.default_rng(1)
    e = rng.normal(size=(3 + 10, 4))
    masked = [np.array([0, 1, 2, 3, 4, 5]), np.array([9]), np.array([], dtype=np.int64)]
    ranked = rank_items(score_all(e, np.arange(3), 3, masked), 4)
    for u in range(3):
        assert not set(ranked[u]) & set(masked[u])


def test_ties_go_to_the_lower_item_id():
    scores = np.array([[1.0, 3.0, 3.0, 0.5, 3.0]])
    assert list(rank_items(scores, 3)[0]) == [1, 2, 4]


def test_recall_examples():
    assert recall_at_k([[4, 1, 2, 3, 0]], [[4]], 5) == 1.0
    assert recall_at_k([[7, 1, 2]], [[7, 9]], 3) == 0.5
    assert recall_at_k([[1, 2], [3, 4]], [[1], []], 2) == 1.0  # empty truth user is skipped


def test_ndcg_examples():
    assert ndcg_at_k([[5, 6, 1, 2]], [[5, 6]], 4) == 1.0
    assert ndcg_at_k([[1, 2, 3]], [[9]], 3) == 0.0
    got = ndcg_at_k([[10, 11, 12]], [[10, 12]], 3)
    expected = (1 + 1 / math.log2(4)) / (1 + 1 / math.log2(3))
    assert abs(got - expected) < 1e-15
    assert abs(got - 1.5 / 1.6309297535714575) < 1e-12
    assert got == pytest.approx(0.9197, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(2, 60), st.integers(0, 2**31))
def test_evaluate_matches_brute_force(p, q, seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(p + q, 3))
    e[p:] = np.round(e[p:], 1)  # create ties
    truth_pairs, mask_pairs = [], []
    for u in range(p):
        items = rng.permutation(q)
        n_mask, n_truth = rng.integers(0, q // 2 + 1), rng.integers(0, 4)
        mask_pairs += [(u, i) for i in items[:n_mask]]
        truth_pairs += [(u, i) for i in items[n_mask:n_mask + n_truth]]
    if not truth_pairs:
        truth_pairs = [(0, 0)]
        mask_pairs = [pair for pair in mask_pairs if pair != (0, 0)]
    truth_pairs, mask_pairs = np.array(truth_pairs), np.array(mask_pairs).reshape(-1, 2)
    ks = (1, 3, 5, 50)
    report = evaluate(e, p, truth_pairs, [mask_pairs], ks)
    scores = e[:p] @ e[p:].T
    truth = [set(t.tolist()) for t in group_by_user(truth_pairs, p)]
    masked = [set(m.tolist()) for m in group_by_user(mask_pairs, p)]
    for k in ks:
        rec, nd = brute_force_metrics(scores, truth, masked, k)
        assert abs(report.recall[k] - rec) < 1e-12
        assert abs(report.ndcg[k] - nd) < 1e-12
    assert all(0 <= report.recall[k] <= 1 and 0 <= report.ndcg[k] <= 1 for k in ks)
    assert all(report.recall[a] <= report.recall[b] + 1e-15 for a, b in zip(ks, ks[1:]))


def test_ndcg_need_not_grow_with_k():
    # a single hit at rank 1 out of two truth items: iDCG grows with K, DCG does not
    assert ndcg_at_k([[1, 2, 3]], [[1, 9]], 1) == 1.0
    assert ndcg_at_k([[1, 2, 3]], [[1, 9]], 3) == pytest.approx(1 / (1 + 1 / math.log2(3)), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31))
def test_ndcg_is_one_iff_truth_fills_the_top(n_truth, k, seed):
    rng = np.random.default_rng(seed)
    ranked = list(rng.permutation(12))
    truth = set(ranked[:n_truth]) if rng.random() < 0.5 else set(rng.choice(12, n_truth, replace=False).tolist())
    filled = set(ranked[:min(k, n_truth)]) <= truth
    assert (ndcg_at_k([ranked], [sorted(truth)], k) == pytest.approx(1.0, abs=1e-15)) == filled


def test_k_equal_to_item_count_recalls_everything():
    rng = np.random.default_rng(2)
    e = rng.normal(size=(4 + 7, 3))
    truth = np.array([(u, (u * 3) % 7) for u in range(4)] + [(0, 6)])
    report = evaluate(e, 4, truth, [], ks=(7,))
    assert report.recall[7] == 1.0


def test_batched_equals_user_by_user():
    rng = np.random.default_rng(3)
    e = rng.normal(size=(20 + 15, 4))
    truth = np.array([(u, rng.integers(15)) for u in range(20)])
    mask = np.array([(u, (u + 1) % 15) for u in range(20) if (u + 1) % 15 != truth[u, 1]])
    whole = evaluate(e, 20, truth, [mask], ks=(5,), chunk=1024)
    chunked = evaluate(e, 20, truth, [mask], ks=(5,), chunk=3)
    assert whole.recall == chunked.recall and whole.ndcg == chunked.ndcg
    singles = [evaluate(e, 20, truth[truth[:, 0] == u], [mask], ks=(5,)).recall[5] for u in range(20)]
    assert abs(math.fsum(singles) / 20 - whole.recall[5]) < 1e-15


def test_repeated_evaluation_is_identical():
    rng = np.random.default_rng(4)
    e = rng.normal(size=(10 + 30, 4))
    truth = np.array([(u, u) for u in range(10)])
    assert evaluate(e, 10, truth, []).to_kv() == evaluate(e, 10, truth, []).to_kv()


def test_random_embeddings_hit_the_random_baseline():
    rng = np.random.default_rng(5)
    p, q, k = 2000, 100, 20
    e = rng.normal(size=(p + q, 16))
    truth = np.column_stack([np.arange(p), rng.integers(q, size=p)])
    recall = evaluate(e, p, truth, [], ks=(k,)).recall[k]
    se = math.sqrt((k / q) * (1 - k / q) / p)
    assert abs(recall - k / q) < 3 * se


def test_report_formats():
    e = np.random.default_rng(6).normal(size=(3 + 6, 2))
    report = evaluate(e, 3, np.array([(0, 1), (2, 5)]), [], ks=(5, 10), fingerprint="abc")
    kv = dict(line.split("=", 1) for line in report.to_kv().splitlines())
    assert kv["fingerprint"] == "abc" and float(kv["recall.5"]) == report.recall[5]
    assert "recall" in report.to_table() and "@10" in report.to_table()
