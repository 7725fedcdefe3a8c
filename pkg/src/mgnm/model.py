"""Full forward pass: local + global embeddings, fused scores and the objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import global_interaction as glo
from . import local_interaction as loc
from . import losses
from .autodiff import Tensor
from .config import GlobalConfig, LocalConfig, LossWeights
from .graph import InteractionGraph

ParameterSet = dict[str, np.ndarray]


def xavier_init(shape: tuple[int, int], rng) -> np.ndarray:
    """Uniform Glorot init in ``+-sqrt(6 / (fan_in + fan_out))``."""
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ValueError(f"xavier_init needs positive dims, got {shape}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Forward:
    e_star: Tensor
    id_layers: list[Tensor]
    modality_layers: dict[str, list[Tensor]] = field(default_factory=dict)
    global_embs: dict[str, Tensor] = field(default_factory=dict)


class MGNM:
    """Multimodal graph recommender over a fixed training graph.

    ``features`` maps modality name (``visual`` / ``textual``) to a ``q x d_m``
    array; only the modalities enabled in ``local.modalities`` are used.
    """

    def __init__(
        self,
        graph: InteractionGraph,
        features: dict[str, np.ndarray],
        local: LocalConfig | None = None,
        global_: GlobalConfig | None = None,
    ):
        self.graph = graph
        self.local = local or LocalConfig()
        self.global_ = global_ or GlobalConfig()
        self.local.validate()
        self.global_.validate()
        self.modalities = self.local.modality_names
        missing = [m for m in self.modalities if m not in features]
        if missing:
            raise ValueError(f"missing features for modalities {missing}")
        self.features = {}
        for m in self.modalities:
            feats = np.asarray(features[m], dtype=np.float64)
            if feats.shape[0] != graph.n_items:
                raise ValueError(f"{m} features have {feats.shape[0]} rows, expected {graph.n_items}")
            self.features[m] = ad.constant(feats)

    @property
    def n_users(self) -> int:
        return self.graph.n_users

    def parameter_shapes(self) -> dict[str, tuple[int, int]]:
        d = self.local.dim
        shapes = {"E_id": (self.graph.n_nodes, d)}
        for m in self.modalities:
            dm = self.features[m].shape[1]
            shapes[f"W_{m}"] = (dm, d)
            shapes[f"W1_{m}"] = (4 * d, dm)
            shapes[f"b1_{m}"] = (1, 4 * d)
            shapes[f"W2_{m}"] = (d, 4 * d)
            shapes[f"b2_{m}"] = (1, d)
            shapes[f"T_{m}"] = (self.global_.hyperedges, d)
        return shapes

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        params = {}
        for name, shape in self.parameter_shapes().items():
            # biases start at zero, matrices use Xavier
            params[name] = np.zeros(shape) if name.startswith("b") else xavier_init(shape, rng)
        return params

    def local_branch(self, params: dict[str, Tensor]) -> tuple[Tensor, list[Tensor], dict[str, list[Tensor]]]:
        """Return ``(E_loc, id_layers, modality_layers)``."""
        g = self.graph
        id_layers = loc.propagate_id(g, params["E_id"], self.local.layers)
        e_loc_id = loc.combine_layers(id_layers)
        modality_layers, local_embs = {}, []
        for m in self.modalities:
            projected = loc.project_modality(self.features[m], params[f"W_{m}"])
            e_loc_m, layers = loc.propagate_modality(g, loc.modality_input(g, projected), self.local.modality_layer)
            modality_layers[m] = layers
            local_embs.append(e_loc_m)
        e_loc = loc.fuse_local(e_loc_id, local_embs) if local_embs else e_loc_id
        return e_loc, id_layers, modality_layers

    def global_branch(self, params: dict[str, Tensor], train_mode: bool = False, rng=None) -> dict[str, Tensor]:
        """Per-modality stacked global embeddings."""
        g = self.graph
        item_ids = ad.slice_rows(params["E_id"], slice(g.n_users, g.n_nodes))
        out = {}
        for m in self.modalities:
            expanded = glo.expand_features(self.features[m], params[f"W1_{m}"], params[f"b1_{m}"])
            filtered = glo.gate_filter(item_ids, expanded, params[f"W2_{m}"], params[f"b2_{m}"])
            h_items = glo.item_hyperedges(filtered, params[f"T_{m}"])
            h_users = glo.user_hyperedges(g, h_items)
            e_u, e_i = glo.hypergraph_propagate(
                h_users, h_items, item_ids, self.global_.depth, self.global_.dropout, train_mode, rng
            )
            out[m] = glo.fuse_global(e_u, e_i)
        return out

    def forward(self, params: dict[str, Tensor], train_mode: bool = False, rng=None) -> Forward:
        e_loc, id_layers, modality_layers = self.local_branch(params)
        global_embs = self.global_branch(params, train_mode, rng)
        e_star = glo.fuse_final(e_loc, list(global_embs.values()), self.global_.alpha)
        return Forward(e_star, id_layers, modality_layers, global_embs)

    def contrastive_terms(self, global_embs: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
        """User-side and item-side cross-modal losses; zero unless both modalities are active."""
        if "visual" not in global_embs or "textual" not in global_embs:
            zero = ad.constant(np.zeros((1, 1)))
            return zero, zero
        p = self.n_users
        v, t = global_embs["visual"], global_embs["textual"]
        n, tau = v.shape[0], self.global_.tau
        hcl_u = glo.contrastive_loss(ad.slice_rows(v, slice(0, p)), ad.slice_rows(t, slice(0, p)), tau)
        hcl_i = glo.contrastive_loss(ad.slice_rows(v, slice(p, n)), ad.slice_rows(t, slice(p, n)), tau)
        return hcl_u, hcl_i

    def loss_components(self, out: Forward, batch: losses.TripleBatch, params: dict[str, Tensor],
                        lambda_reg: float, ddr_cache: dict | None = None) -> dict[str, Tensor]:
        p = self.n_users
        comps = {"bpr": losses.bpr_loss(out.e_star, batch, p, lambda_reg, list(params.values()))}
        comps["hcl_u"], comps["hcl_i"] = self.contrastive_terms(out.global_embs)

        def coeffs(key, users, items):
            if ddr_cache is None:
                return None
            if key not in ddr_cache:
                ddr_cache[key] = losses.ddr_coefficients(users, items)
            return ddr_cache[key]

        users, items = losses.split_layers(out.id_layers, p)
        comps["ddr"] = losses.ddr_loss(users, items, coeffs("id", users, items))
        per_modality = {m: losses.split_layers(layers, p) for m, layers in out.modality_layers.items()}
        mm_coeffs = None
        if ddr_cache is not None:
            mm_coeffs = {m: coeffs(m, *blocks) for m, blocks in per_modality.items()}
        comps["ddr_mm"] = losses.ddr_mm_loss(per_modality, mm_coeffs)
        return comps

    def objective(self, params: dict[str, Tensor], batch: losses.TripleBatch, weights: LossWeights,
                  train_mode: bool = True, rng=None, ddr_cache: dict | None = None):
        """Return ``(total_loss, components)`` for one batch."""
        out = self.forward(params, train_mode, rng)
        comps = self.loss_components(out, batch, params, weights.lambda_reg, ddr_cache)
        return losses.total_loss(comps, weights), comps

    def embeddings(self, params: ParameterSet) -> np.ndarray:
        """Evaluation-mode final embeddings (no dropout, no tape)."""
        tensors = {k: ad.constant(v) for k, v in params.items()}
        return self.forward(tensors, train_mode=False).e_star.numpy()
