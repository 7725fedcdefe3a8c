"""Bipartite user-item interaction graph and per-user data splits."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import SparseMatrix, Tensor, spmm

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionGraph:
    """Users occupy node ids ``[0, n_users)``; item ``i`` is node ``n_users + i``."""

    n_users: int
    n_items: int
    interactions: np.ndarray  # (n, 2) unique (user, item) pairs, sorted
    adjacency: SparseMatrix
    norm_adjacency: SparseMatrix
    user_mean: SparseMatrix  # p x q, row u holds 1/|N_u| on u's items
    user_neighbors: tuple[np.ndarray, ...]

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.csr.sum(axis=1)).ravel()


def dedup_pairs(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(arr) == 0:
        return arr
    return np.unique(arr, axis=0)


def build_graph(triples, n_users: int, n_items: int) -> InteractionGraph:
    """Build adjacency ``A`` and ``D^-1/2 A D^-1/2`` from (user, item) pairs.

    Duplicated pairs collapse to a single edge.  Every user and item must keep
    at least one interaction; filtering is the caller's job.
    """
    raw = np.asarray(triples, dtype=np.int64).reshape(-1, 2)
    if len(raw) == 0:
        raise GraphError("no interactions given")
    bad = (raw[:, 0] < 0) | (raw[:, 0] >= n_users) | (raw[:, 1] < 0) | (raw[:, 1] >= n_items)
    if bad.any():
        u, i = raw[np.flatnonzero(bad)[0]]
        raise GraphError(f"interaction ({u}, {i}) out of range for {n_users} users / {n_items} items")
    pairs = dedup_pairs(raw)
    users, items = pairs[:, 0], pairs[:, 1]

    user_deg = np.bincount(users, minlength=n_users)
    item_deg = np.bincount(items, minlength=n_items)
    if (user_deg == 0).any():
        raise GraphError(f"user {int(np.flatnonzero(user_deg == 0)[0])} has no interactions")
    if (item_deg == 0).any():
        raise GraphError(f"item {int(np.flatnonzero(item_deg == 0)[0])} has no interactions")

    n = n_users + n_items
    rows = np.concatenate([users, items + n_users])
    cols = np.concatenate([items + n_users, users])
    adjacency = SparseMatrix(rows, cols, np.ones(len(rows)), (n, n))

    deg = np.concatenate([user_deg, item_deg]).astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg)
    norm = SparseMatrix(rows, cols, inv_sqrt[rows] * inv_sqrt[cols], (n, n))

    user_mean = SparseMatrix(users, items, 1.0 / user_deg[users], (n_users, n_items))
    bounds = np.concatenate([[0], np.cumsum(user_deg)])
    neighbors = tuple(items[bounds[u]:bounds[u + 1]] for u in range(n_users))
    return InteractionGraph(n_users, n_items, pairs, adjacency, norm, user_mean, neighbors)


def user_modality_init(graph: InteractionGraph, item_feats: Tensor) -> Tensor:
    """Each user's row is the mean of its neighbouring items' feature rows."""
    if item_feats.shape[0] != graph.n_items:
        raise GraphError(f"item feature rows {item_feats.shape[0]} != item count {graph.n_items}")
    return spmm(graph.user_mean, item_feats)


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, valid, test) counts for one user's ``n`` interactions."""
    held = max(1, n // 10)
    return n - 2 * held, held, held


def split_interactions(triples, seed: int, min_interactions: int = 3):
    """Per-user 8:1:1 split of a user's shuffled history.

    Users with fewer than ``min_interactions`` distinct items are dropped.
    Returns ``(train, valid, test)`` as ``(n, 2)`` int arrays.
    """
    pairs = dedup_pairs(triples)
    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    excluded = 0
    if len(pairs):
        users, starts = np.unique(pairs[:, 0], return_index=True)
        ends = np.append(starts[1:], len(pairs))
        for u, a, b in zip(users, starts, ends):
            items = pairs[a:b, 1]
            if len(items) < min_interactions:
                excluded += 1
                continue
            items = items[rng.permutation(len(items))]
            n_train, n_valid, _ = split_sizes(len(items))
            chunks = (items[:n_train], items[n_train:n_train + n_valid], items[n_train + n_valid:])
            for part, chunk in zip(parts, chunks):
                part.append(np.column_stack([np.full(len(chunk), u), np.sort(chunk)]))
    if excluded:
        logger.info("excluded %d users with fewer than %d interactions", excluded, min_interactions)
    return tuple(
        np.concatenate(p).astype(np.int64) if p else np.empty((0, 2), dtype=np.int64) for p in parts
    )
