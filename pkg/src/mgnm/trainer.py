"""Negative sampling, Adam, early-stopped training and binary checkpoints."""
from __future__ import annotations

import copy
import logging
import math
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .evaluation import MetricsReport, evaluate
from .graph import build_graph
from .losses import COMPONENTS, TripleBatch, combine_logged
from .model import MGNM, ParameterSet

logger = logging.getLogger(__name__)

SELECTION_K = 20


class TrainingError(RuntimeError):
    pass


@dataclass
class Dataset:
    n_users: int
    n_items: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    features: dict[str, np.ndarray] = field(default_factory=dict)

    def all_pairs(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParameterSet) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update applied in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ad.ShapeError("adam_step", params[name].shape, g.shape)
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    for name, g in grads.items():
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- sampling ------------------------------------------------------------------

class NegativeSampler:
    """Uniform positive pairs from ``train``, uniform negatives outside ``known``."""

    def __init__(self, train: np.ndarray, known: np.ndarray, n_users: int, n_items: int, max_tries: int = 100):
        self.n_items = n_items
        self.max_tries = max_tries
        known = np.unique(np.asarray(known, dtype=np.int64).reshape(-1, 2), axis=0)
        self.known_codes = np.sort(known[:, 0] * n_items + known[:, 1])
        per_user = np.bincount(known[:, 0], minlength=n_users)
        full = np.flatnonzero(per_user >= n_items)
        train = np.asarray(train, dtype=np.int64).reshape(-1, 2)
        if len(full):
            logger.warning("skipping %d users who interacted with every item", len(full))
            train = train[~np.isin(train[:, 0], full)]
        if len(train) == 0:
            raise TrainingError("no training pairs left to sample from")
        self.train = train

    def is_known(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        codes = users * self.n_items + items
        pos = np.searchsorted(self.known_codes, codes)
        pos = np.minimum(pos, len(self.known_codes) - 1)
        return self.known_codes[pos] == codes

    def sample(self, batch_size: int, rng: np.random.Generator) -> TripleBatch:
        picks = self.train[rng.integers(len(self.train), size=batch_size)]
        users, pos = picks[:, 0].copy(), picks[:, 1].copy()
        neg = rng.integers(self.n_items, size=batch_size)
        pending = np.flatnonzero(self.is_known(users, neg))
        tries = 1
        while len(pending):
            if tries >= self.max_tries:
                # give up on these users and redraw the positive pair
                repick = self.train[rng.integers(len(self.train), size=len(pending))]
                users[pending], pos[pending] = repick[:, 0], repick[:, 1]
                tries = 0
            neg[pending] = rng.integers(self.n_items, size=len(pending))
            pending = pending[self.is_known(users[pending], neg[pending])]
            tries += 1
        return TripleBatch(users, pos, neg)


# -- training loop ---------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    losses: dict[str, float]
    total: float
    valid_recall: float
    seconds: float


@dataclass
class FitResult:
    params: ParameterSet
    state: OptimizerState
    log: list[EpochLog]
    best_epoch: int
    best_metric: float
    model: MGNM


def build_model(dataset: Dataset, config: TrainConfig) -> MGNM:
    graph = build_graph(dataset.train, dataset.n_users, dataset.n_items)
    return MGNM(graph, dataset.features, config.local, config.global_)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


def validation_report(model: MGNM, params: ParameterSet, dataset: Dataset, ks=(SELECTION_K,),
                      fingerprint: str = "") -> MetricsReport:
    e_star = model.embeddings(params)
    return evaluate(e_star, dataset.n_users, dataset.valid, [dataset.train], ks, fingerprint, split="valid")


def test_report(model: MGNM, params: ParameterSet, dataset: Dataset, ks, fingerprint: str = "") -> MetricsReport:
    e_star = model.embeddings(params)
    return evaluate(e_star, dataset.n_users, dataset.test, [dataset.train, dataset.valid], ks, fingerprint)


def fit(dataset: Dataset, config: TrainConfig, params: ParameterSet | None = None) -> FitResult:
    """Train with Adam and keep the parameters of the best validation Recall@20."""
    config.validate()
    model = build_model(dataset, config)
    if params is None:
        params = model.init_params(np.random.default_rng([config.seed, 0]))
    state = OptimizerState.zeros_like(params)
    sampler = NegativeSampler(dataset.train, dataset.all_pairs(), dataset.n_users, dataset.n_items)
    n_batches = math.ceil(len(dataset.train) / config.batch_size)
    weights = config.weights

    best = (-1.0, 0, copy.deepcopy(params), copy.deepcopy(state))
    log: list[EpochLog] = []
    stale = 0
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        sums = dict.fromkeys(COMPONENTS, 0.0)
        total_sum = 0.0
        for _ in range(n_batches):
            rng = step_rng(config.seed, step)
            batch = sampler.sample(config.batch_size, rng)
            tape = ad.Tape()
            tensors = {k: tape.leaf(k, v) for k, v in params.items()}
            total, comps = model.objective(tensors, batch, weights, train_mode=True, rng=rng)
            values = {k: comps[k].item() for k in COMPONENTS}
            for k, v in values.items():
                if not math.isfinite(v):
                    raise TrainingError(f"non-finite {k} loss at epoch {epoch}, step {step}")
            if not math.isfinite(total.item()):
                raise TrainingError(f"non-finite total loss at epoch {epoch}, step {step}")
            grads = tape.backward(total)
            adam_step(params, grads, state, config.learning_rate)
            for k, v in values.items():
                sums[k] += v
            total_sum += total.item()
            step += 1

        metric = validation_report(model, params, dataset).recall[SELECTION_K]
        entry = EpochLog(epoch, sums, total_sum, metric, time.perf_counter() - t0)
        log.append(entry)
        logger.info("epoch %d total=%.4f %s valid_recall@20=%.4f", epoch, total_sum,
                    " ".join(f"{k}={v:.4f}" for k, v in sums.items()), metric)
        if metric > best[0]:
            best = (metric, epoch, copy.deepcopy(params), copy.deepcopy(state))
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop after epoch %d (best epoch %d)", epoch, best[1])
                break
    metric, best_epoch, best_params, best_state = best
    return FitResult(best_params, best_state, log, best_epoch, metric, model)


def logged_identity_gap(entry: EpochLog, config: TrainConfig) -> float:
    return abs(entry.total - combine_logged(entry.losses, config.weights))


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"MGNM0001"


class CheckpointError(ValueError):
    pass


def _records(params: ParameterSet, state: OptimizerState):
    for name in sorted(params):
        yield f"param/{name}", params[name]
    for name in sorted(state.m):
        yield f"adam.m/{name}", state.m[name]
        yield f"adam.v/{name}", state.v[name]
    yield "adam.step", np.array([[float(state.step)]])


def encode_checkpoint(params: ParameterSet, state: OptimizerState, config_hash: bytes) -> bytes:
    if len(config_hash) != 8:
        raise CheckpointError("config hash must be 8 bytes")
    chunks = [MAGIC, config_hash]
    for name, arr in _records(params, state):
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<QQ", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes, config_hash: bytes | None = None) -> tuple[ParameterSet, OptimizerState]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if config_hash is not None and blob[8:16] != config_hash:
        raise CheckpointError("checkpoint was written for a different config")
    pos = 16
    tensors = {}
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise CheckpointError("truncated record header")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + n + 16 > len(blob):
            raise CheckpointError("truncated record name")
        name = blob[pos:pos + n].decode()
        pos += n
        rows, cols = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        size = rows * cols * 8
        if pos + size > len(blob):
            raise CheckpointError(f"truncated payload for {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += size
    if "adam.step" not in tensors:
        raise CheckpointError("checkpoint lacks optimizer step")
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    m = {k[len("adam.m/"):]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    v = {k[len("adam.v/"):]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    return params, OptimizerState(m, v, int(tensors["adam.step"][0, 0]))


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: ParameterSet, state: OptimizerState, config_hash: bytes) -> None:
    atomic_write(path, encode_checkpoint(params, state, config_hash))


def load_checkpoint(path, config_hash: bytes | None = None) -> tuple[ParameterSet, OptimizerState]:
    return decode_checkpoint(Path(path).read_bytes(), config_hash)
