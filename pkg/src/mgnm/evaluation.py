"""Full-ranking top-K evaluation: Recall@K and NDCG@K."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_KS = (5, 10, 20, 50)


@dataclass
class MetricsReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    fingerprint: str = ""
    split: str = "test"
    extra: dict[str, str] = field(default_factory=dict)

    def to_table(self) -> str:
        ks = sorted(self.recall)
        header = f"{'metric':<8}" + "".join(f"{'@' + str(k):>10}" for k in ks)
        lines = [
            f"# split={self.split} users={self.n_users} fingerprint={self.fingerprint}",
            header,
            f"{'recall':<8}" + "".join(f"{self.recall[k]:>10.4f}" for k in ks),
            f"{'ndcg':<8}" + "".join(f"{self.ndcg[k]:>10.4f}" for k in ks),
        ]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = [f"split={self.split}", f"users={self.n_users}", f"fingerprint={self.fingerprint}"]
        lines += [f"{k}={v}" for k, v in self.extra.items()]
        for k in sorted(self.recall):
            lines.append(f"recall.{k}={self.recall[k]!r}")
        for k in sorted(self.ndcg):
            lines.append(f"ndcg.{k}={self.ndcg[k]!r}")
        return "\n".join(lines) + "\n"


def group_by_user(pairs: np.ndarray, n_users: int) -> list[np.ndarray]:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    order = np.argsort(pairs[:, 0], kind="stable")
    pairs = pairs[order]
    bounds = np.searchsorted(pairs[:, 0], np.arange(n_users + 1))
    return [pairs[bounds[u]:bounds[u + 1], 1] for u in range(n_users)]


def score_all(e_star: np.ndarray, users, n_users: int, masked: list[np.ndarray] | None = None) -> np.ndarray:
    """Inner-product scores of ``users`` against every item; masked items get ``-inf``."""
    users = np.asarray(users, dtype=np.int64)
    scores = e_star[users] @ e_star[n_users:].T
    if masked is not None:
        for row, u in enumerate(users):
            scores[row, masked[u]] = -np.inf
    return scores


def rank_items(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` item ids per row; ties go to the lower item id."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def _user_recall(ranked, truth: set, k: int) -> float:
    hits = sum(1 for item in ranked[:k] if item in truth)
    return hits / len(truth)


def _user_ndcg(ranked, truth: set, k: int) -> float:
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(ranked[:k]) if item in truth)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(truth))))
    return dcg / idcg


def recall_at_k(ranked, truth, k: int) -> float:
    """Mean over users with non-empty truth of ``|top-k & truth| / |truth|``."""
    vals = [_user_recall(r, set(t), k) for r, t in zip(ranked, truth) if len(t)]
    return math.fsum(vals) / len(vals) if vals else 0.0


def ndcg_at_k(ranked, truth, k: int) -> float:
    """Binary-relevance NDCG@k averaged over users with non-empty truth."""
    vals = [_user_ndcg(r, set(t), k) for r, t in zip(ranked, truth) if len(t)]
    return math.fsum(vals) / len(vals) if vals else 0.0


def evaluate(
    e_star: np.ndarray,
    n_users: int,
    truth_pairs: np.ndarray,
    mask_pairs: list[np.ndarray],
    ks=DEFAULT_KS,
    fingerprint: str = "",
    split: str = "test",
    chunk: int = 1024,
) -> MetricsReport:
    """Rank every unmasked item for each user holding ground truth."""
    ks = tuple(sorted(ks))
    truth = group_by_user(truth_pairs, n_users)
    masked_pairs = np.concatenate([np.asarray(p).reshape(-1, 2) for p in mask_pairs]) if mask_pairs else np.empty((0, 2))
    masked = group_by_user(masked_pairs, n_users)
    users = np.array([u for u in range(n_users) if len(truth[u])], dtype=np.int64)
    n_items = e_star.shape[0] - n_users
    k_max = min(max(ks), n_items)
    ranked = np.empty((len(users), k_max), dtype=np.int64)
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        ranked[start:start + len(block)] = rank_items(score_all(e_star, block, n_users, masked), k_max)
    user_truth = [truth[u] for u in users]
    return MetricsReport(
        recall={k: recall_at_k(ranked, user_truth, k) for k in ks},
        ndcg={k: ndcg_at_k(ranked, user_truth, k) for k in ks},
        n_users=len(users),
        fingerprint=fingerprint,
        split=split,
    )
