"""Modality-guided purifier, hyperedge propagation and cross-modal contrast."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graph import InteractionGraph


def expand_features(item_feats: Tensor, w1: Tensor, b1: Tensor) -> Tensor:
    """Affine lift ``E W1^T + b1`` into the 4d intermediate space."""
    if item_feats.shape[1] != w1.shape[1]:
        raise ShapeError("expand_features", item_feats.shape, w1.shape)
    return ad.matmul(item_feats, ad.transpose(w1)) + b1


def gate_filter(item_ids: Tensor, expanded: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Scale item ID embeddings by a sigmoid gate computed from modality features."""
    gate = ad.sigmoid(ad.matmul(expanded, ad.transpose(w2)) + b2)
    if gate.shape != item_ids.shape:
        raise ShapeError("gate_filter", item_ids.shape, gate.shape)
    return ad.mul(item_ids, gate)


def item_hyperedges(filtered: Tensor, t: Tensor) -> Tensor:
    if filtered.shape[1] != t.shape[1]:
        raise ShapeError("item_hyperedges", filtered.shape, t.shape)
    return ad.matmul(filtered, ad.transpose(t))


def user_hyperedges(graph: InteractionGraph, h_items: Tensor) -> Tensor:
    """Each user's affinities are the mean affinity over its items."""
    return ad.spmm(graph.user_mean, h_items)


def hypergraph_propagate(
    h_users: Tensor,
    h_items: Tensor,
    item_seed: Tensor,
    depth: int,
    dropout_rate: float = 0.0,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Propagate item embeddings through hyperedge dependency matrices.

    Both updates read the item stream of the previous step.  Dropout masks the
    dependency matrices in train mode only.
    """
    if depth < 1:
        raise ValueError(f"hypergraph depth must be >= 1, got {depth}")
    hi = ad.row_softmax(h_items)
    hu = ad.row_softmax(h_users)
    hi_t = ad.transpose(hi)
    item_dep = ad.matmul(hi, hi_t)
    user_dep = ad.matmul(hu, hi_t)
    drop = train_mode and dropout_rate > 0.0
    if drop and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    e_items, e_users = item_seed, None
    for _ in range(depth):
        mi = ad.dropout_mask(item_dep.shape, dropout_rate, rng) if drop else None
        mu = ad.dropout_mask(user_dep.shape, dropout_rate, rng) if drop else None
        e_users = ad.matmul(ad.dropout(user_dep, mu), e_items)
        e_items = ad.matmul(ad.dropout(item_dep, mi), e_items)
    return e_users, e_items


def fuse_global(e_users: Tensor, e_items: Tensor) -> Tensor:
    return ad.concat_rows([e_users, e_items])


def contrastive_loss(a: Tensor, b: Tensor, tau: float) -> Tensor:
    """In-batch InfoNCE over cosine similarity, summed over rows.

    Row ``u`` of ``a`` is pulled to row ``u`` of ``b`` and pushed from every
    other row of ``b``.
    """
    if a.shape != b.shape:
        raise ShapeError("contrastive_loss", a.shape, b.shape)
    n = a.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least two rows")
    sim = ad.matmul(ad.row_l2_normalize(a), ad.transpose(ad.row_l2_normalize(b)))
    log_prob = ad.log(ad.row_softmax(ad.scale(sim, 1.0 / tau)))
    return ad.scale(ad.sum(ad.mul(log_prob, ad.constant(np.eye(n)))), -1.0)


def fuse_final(e_loc: Tensor, global_embs: list[Tensor], alpha: float) -> Tensor:
    out = e_loc
    if alpha == 0.0:
        return out
    for g in global_embs:
        if g.shape != e_loc.shape:
            raise ShapeError("fuse_final", e_loc.shape, g.shape)
        out = out + ad.scale(ad.row_l2_normalize(g), alpha)
    return out
