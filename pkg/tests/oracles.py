"""Independent reference implementations and shared instances for the tests.

Everything here is written with dense arrays and explicit loops so that it
shares no code path with the package under test.
"""
from __future__ import annotations

import math

import numpy as np

from mgnm import autodiff as ad
from mgnm import local_interaction as loc
from mgnm import losses
from mgnm.config import GlobalConfig, LocalConfig, LossWeights
from mgnm.graph import build_graph
from mgnm.losses import TripleBatch
from mgnm.model import MGNM


# -- graphs ------------------------------------------------------------------------

def random_pairs(rng: np.random.Generator, p: int, q: int, density: float = 0.3) -> np.ndarray:
    """Random bipartite edges in which every user and every item has a neighbour."""
    mask = rng.random((p, q)) < density
    for u in range(p):
        if not mask[u].any():
            mask[u, rng.integers(q)] = True
    for i in range(q):
        if not mask[:, i].any():
            mask[rng.integers(p), i] = True
    return np.argwhere(mask).astype(np.int64)


def dense_adjacency(pairs: np.ndarray, p: int, q: int) -> np.ndarray:
    a = np.zeros((p + q, p + q))
    for u, i in pairs:
        a[u, p + i] = 1.0
        a[p + i, u] = 1.0
    return a


def dense_norm_adjacency(pairs: np.ndarray, p: int, q: int) -> np.ndarray:
    a = dense_adjacency(pairs, p, q)
    d = np.diag(1.0 / np.sqrt(a.sum(axis=1)))
    return d @ a @ d


def dense_user_mean(pairs: np.ndarray, p: int, q: int) -> np.ndarray:
    r = np.zeros((p, q))
    for u, i in pairs:
        r[u, i] = 1.0
    return r / r.sum(axis=1, keepdims=True)


# -- correlation -------------------------------------------------------------------

def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pairwise Pearson correlation with zero-variance columns mapped to 0."""
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    cov = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(math.fsum((a - mx) ** 2 for a in x))
    sy = math.sqrt(math.fsum((b - my) ** 2 for b in y))
    if sx < 1e-12 or sy < 1e-12:
        return 0.0
    return cov / (sx * sy)


def p_cov_oracle(x: np.ndarray) -> float:
    d = x.shape[1]
    total = 0.0
    for a in range(d):
        for b in range(d):
            if a != b:
                total += pearson(x[:, a], x[:, b]) ** 2
    return math.sqrt(total) / math.sqrt(2.0)


# -- ranking metrics -----------------------------------------------------------------

def brute_force_metrics(scores: np.ndarray, truth: list[set], masked: list[set], k: int) -> tuple[float, float]:
    """Full ranking by explicit sort on (-score, item id)."""
    recalls, ndcgs = [], []
    for u in range(scores.shape[0]):
        if not truth[u]:
            continue
        candidates = [i for i in range(scores.shape[1]) if i not in masked[u]]
        ranking = sorted(candidates, key=lambda i: (-scores[u, i], i))[:k]
        hits = [r for r, i in enumerate(ranking) if i in truth[u]]
        recalls.append(len(hits) / len(truth[u]))
        dcg = sum(1.0 / math.log2(r + 2) for r in hits)
        idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(truth[u]))))
        ndcgs.append(dcg / idcg)
    return math.fsum(recalls) / len(recalls), math.fsum(ndcgs) / len(ndcgs)


# -- the gradient-check instance -------------------------------------------------------

FD_WEIGHTS = LossWeights(lambda_reg=1e-2, omega=0.1, beta=0.1, delta=0.1)


def fd_instance(seed: int, n_users: int = 6, n_items: int = 5):
    """Small two-modality model with well-conditioned parameters.

    ID and hyperedge matrices are scaled up and biases are nonzero so that
    gates are not saturated and hyperedge softmaxes are not flat; otherwise
    many true gradients sit below the central-difference noise floor.
    """
    rng = np.random.default_rng(seed)
    pairs = np.array([(u, (u + k) % n_items) for u in range(n_users) for k in (0, 1)])
    graph = build_graph(pairs, n_users, n_items)
    feats = {"visual": rng.normal(size=(n_items, 12)), "textual": rng.normal(size=(n_items, 12))}
    model = MGNM(graph, feats, LocalConfig(dim=8, layers=2, modality_layer=1),
                 GlobalConfig(hyperedges=2, depth=2, dropout=0.2, tau=0.2, alpha=0.2))
    params = model.init_params(rng)
    for name in params:
        if name == "E_id" or name.startswith("T_"):
            params[name] = 3.0 * params[name]
        elif name.startswith("b"):
            params[name] = 0.1 * rng.normal(size=params[name].shape)
    users = np.arange(n_users)
    batch = TripleBatch(users, users % n_items, (users + 3) % n_items)
    return model, params, batch


def merged(tensors: dict, fixed: dict) -> dict:
    out = {k: ad.constant(v) for k, v in fixed.items()}
    out.update(tensors)
    return out


def fd_builders(model: MGNM, params: dict, batch: TripleBatch, weights: LossWeights = FD_WEIGHTS):
    """Loss closures for the full objective and each component.

    Each entry is ``(builder, checked_params)``; parameters a loss cannot reach
    are held fixed so the check spends no evaluations on them.  DDR layer
    weights are computed once at the base point and pinned, which is exactly
    the stop-gradient surrogate used in training.
    """
    cache: dict = {}
    p = model.n_users

    def full(tape, t):
        total, _ = model.objective(t, batch, weights, rng=np.random.default_rng(7), ddr_cache=cache)
        return total

    def bpr(tape, t):
        out = model.forward(t, train_mode=True, rng=np.random.default_rng(7))
        return losses.bpr_loss(out.e_star, batch, p, weights.lambda_reg, list(t.values()))

    global_names = {n for n in params if n == "E_id" or n.split("_")[0] in ("W1", "b1", "W2", "b2", "T")}

    def contrastive(tape, t):
        embs = model.global_branch(merged(t, {k: v for k, v in params.items() if k not in t}),
                                   train_mode=True, rng=np.random.default_rng(7))
        hcl_u, hcl_i = model.contrastive_terms(embs)
        return hcl_u + hcl_i

    def ddr(tape, t):
        layers = loc.propagate_id(model.graph, t["E_id"], model.local.layers)
        users, items = losses.split_layers(layers, p)
        if "id" not in cache:
            cache["id"] = losses.ddr_coefficients(users, items)
        return losses.ddr_loss(users, items, cache["id"])

    def ddr_mm(tape, t):
        per_modality = {}
        for m in model.modalities:
            projected = loc.project_modality(model.features[m], t[f"W_{m}"])
            _, layers = loc.propagate_modality(model.graph, loc.modality_input(model.graph, projected),
                                               model.local.modality_layer)
            per_modality[m] = losses.split_layers(layers, p)
        coeffs = {}
        for m, blocks in per_modality.items():
            key = f"mm:{m}"
            if key not in cache:
                cache[key] = losses.ddr_coefficients(*blocks)
            coeffs[m] = cache[key]
        return losses.ddr_mm_loss(per_modality, coeffs)

    def pick(names):
        return {k: params[k] for k in sorted(names)}

    return {
        "full": (full, dict(params)),
        "bpr": (bpr, dict(params)),
        "contrastive": (contrastive, pick(global_names)),
        "ddr": (ddr, pick({"E_id"})),
        "ddr_mm": (ddr_mm, pick({f"W_{m}" for m in model.modalities})),
    }
