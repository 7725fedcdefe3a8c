"""Collaborative and modality-side graph propagation on the local graph."""
from __future__ import annotations

import logging

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graph import InteractionGraph

logger = logging.getLogger(__name__)


def propagate(graph: InteractionGraph, x: Tensor, n_layers: int) -> list[Tensor]:
    """``[X, AX, A^2 X, ...]`` with ``A`` the normalized adjacency; ``n_layers + 1`` entries."""
    if x.shape[0] != graph.n_nodes:
        raise ShapeError("propagate", graph.norm_adjacency.shape, x.shape)
    layers = [x]
    for _ in range(n_layers):
        layers.append(ad.spmm(graph.norm_adjacency, layers[-1]))
    return layers


def propagate_id(graph: InteractionGraph, e_id: Tensor, n_layers: int) -> list[Tensor]:
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    return propagate(graph, e_id, n_layers)


def combine_layers(layers: list[Tensor]) -> Tensor:
    """Arithmetic mean over all layers (LightGCN convention)."""
    if not layers:
        raise ValueError("combine_layers needs at least one layer")
    total = layers[0]
    for layer in layers[1:]:
        if layer.shape != total.shape:
            raise ShapeError("combine_layers", total.shape, layer.shape)
        total = total + layer
    return ad.scale(total, 1.0 / len(layers))


def project_modality(item_feats: Tensor, w: Tensor) -> Tensor:
    return ad.matmul(item_feats, w)


def modality_input(graph: InteractionGraph, projected_items: Tensor) -> Tensor:
    """Stack neighbour-mean user rows above the projected item rows."""
    users = ad.spmm(graph.user_mean, projected_items)
    return ad.concat_rows([users, projected_items])


def propagate_modality(graph: InteractionGraph, stacked: Tensor, k: int) -> tuple[Tensor, list[Tensor]]:
    """Return layer ``k`` and the full layer list ``0..k``."""
    if k < 1:
        raise ValueError(f"modality propagation layer must be >= 1, got {k}")
    layers = propagate(graph, stacked, k)
    return layers[k], layers


def fuse_local(e_loc_id: Tensor, modality_embs: list[Tensor]) -> Tensor:
    if not modality_embs:
        logger.warning("fuse_local called without modality embeddings; returning ID embeddings")
        return e_loc_id
    total = modality_embs[0]
    for m in modality_embs[1:]:
        total = total + m
    if total.shape != e_loc_id.shape:
        raise ShapeError("fuse_local", e_loc_id.shape, total.shape)
    return e_loc_id + ad.row_l2_normalize(total)
