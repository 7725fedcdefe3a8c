"""BPR ranking loss, DDR decorrelation penalty and the combined objective."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import EPS, Tensor
from .config import LossWeights


@dataclass(frozen=True)
class TripleBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        if not (len(self.users) == len(self.pos) == len(self.neg)):
            raise ValueError("triple batch columns differ in length")

    @property
    def batch_size(self) -> int:
        return len(self.users)


def scores(user_embs: Tensor, item_embs: Tensor) -> Tensor:
    """Row-wise inner products, shape (n, 1)."""
    return ad.scale(ad.row_mean(ad.mul(user_embs, item_embs)), float(user_embs.shape[1]))


def l2_penalty(params: Iterable[Tensor]) -> Tensor | None:
    total = None
    for p in params:
        sq = ad.sum(ad.mul(p, p))
        total = sq if total is None else total + sq
    return total


def bpr_loss(e_star: Tensor, batch: TripleBatch, n_users: int, lambda_reg: float = 0.0, params=()) -> Tensor:
    """Summed ``-ln sigmoid(r_ui - r_uj)`` plus ``lambda * ||params||^2``."""
    if batch.batch_size == 0:
        raise ValueError("empty triple batch")
    u = ad.slice_rows(e_star, batch.users)
    i = ad.slice_rows(e_star, batch.pos + n_users)
    j = ad.slice_rows(e_star, batch.neg + n_users)
    diff = scores(u, i) - scores(u, j)
    loss = ad.sum(ad.softplus(ad.scale(diff, -1.0)))
    reg = l2_penalty(params)
    if lambda_reg and reg is not None:
        loss = loss + ad.scale(reg, lambda_reg)
    return loss


def _correlation_offdiag(x: Tensor) -> Tensor:
    n, d = x.shape
    if n < 2:
        raise ValueError(f"column correlation needs at least 2 rows, got {n}")
    centered = x - ad.col_mean(x)
    z = ad.row_l2_normalize(ad.transpose(centered))
    corr = ad.matmul(z, ad.transpose(z))
    return ad.mul(corr, ad.constant(1.0 - np.eye(d)))


def column_correlation(x: Tensor) -> Tensor:
    """Pearson correlation between columns; zero-variance columns correlate 0, diagonal is 1."""
    return _correlation_offdiag(x) + ad.constant(np.eye(x.shape[1]))


def p_cov(x: Tensor) -> Tensor:
    """``||P_R - I||_F / sqrt(2)`` for the column correlation matrix ``P_R``."""
    return ad.scale(ad.frobenius_norm(_correlation_offdiag(x)), 1.0 / math.sqrt(2.0))


def layer_coefficients(values) -> np.ndarray:
    """Inverse-penalty weights normalized to sum to one."""
    inv = 1.0 / np.maximum(np.asarray(values, dtype=np.float64), EPS)
    return inv / inv.sum()


def ddr_coefficients(user_layers: list[Tensor], item_layers: list[Tensor]) -> tuple[np.ndarray, np.ndarray]:
    return (
        layer_coefficients([p_cov(ad.constant(x.data)).item() for x in user_layers]),
        layer_coefficients([p_cov(ad.constant(x.data)).item() for x in item_layers]),
    )


def ddr_loss(user_layers: list[Tensor], item_layers: list[Tensor], coefficients=None) -> Tensor:
    """Layer-weighted decorrelation penalty over user and item blocks.

    The per-layer weights are constants in the backward pass.  Pass
    ``coefficients=(mu_users, mu_items)`` to pin them.
    """
    if len(user_layers) != len(item_layers) or not user_layers:
        raise ValueError(f"layer lists differ in length: {len(user_layers)} vs {len(item_layers)}")
    user_pen = [p_cov(x) for x in user_layers]
    item_pen = [p_cov(x) for x in item_layers]
    if coefficients is None:
        mu_u = layer_coefficients([t.item() for t in user_pen])
        mu_i = layer_coefficients([t.item() for t in item_pen])
    else:
        mu_u, mu_i = coefficients
    total = None
    for pu, pi, wu, wi in zip(user_pen, item_pen, mu_u, mu_i):
        term = ad.scale(pu, float(wu)) + ad.scale(pi, float(wi))
        total = term if total is None else total + term
    return total


def split_layers(layers: list[Tensor], n_users: int) -> tuple[list[Tensor], list[Tensor]]:
    n = layers[0].shape[0]
    return (
        [ad.slice_rows(x, slice(0, n_users)) for x in layers],
        [ad.slice_rows(x, slice(n_users, n)) for x in layers],
    )


def ddr_mm_loss(per_modality: dict[str, tuple[list[Tensor], list[Tensor]]], coefficients=None) -> Tensor:
    """Sum of :func:`ddr_loss` over modalities; zero when none are configured."""
    total = ad.constant(np.zeros((1, 1)))
    for name, (users, items) in per_modality.items():
        coeff = None if coefficients is None else coefficients.get(name)
        total = total + ddr_loss(users, items, coeff)
    return total


COMPONENTS = ("bpr", "hcl_u", "hcl_i", "ddr", "ddr_mm")


def total_loss(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    total = components["bpr"]
    total = total + ad.scale(components["hcl_u"] + components["hcl_i"], weights.omega)
    total = total + ad.scale(components["ddr"], weights.beta)
    return total + ad.scale(components["ddr_mm"], weights.delta)


def combine_logged(values: dict[str, float], weights: LossWeights) -> float:
    """Scalar mirror of :func:`total_loss` for logged component values."""
    return (
        values["bpr"]
        + weights.omega * (values["hcl_u"] + values["hcl_i"])
        + weights.beta * values["ddr"]
        + weights.delta * values["ddr_mm"]
    )
