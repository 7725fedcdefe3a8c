"""Interaction/feature file formats, dataset preparation and synthetic data."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, SynthConfig
from .graph import split_interactions
from .trainer import Dataset, atomic_write

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"MMFT0001"
_FEATURE_HEADER = struct.Struct("<8sQQ")
MODALITY_FILES = {"visual": "visual.mmft", "textual": "textual.mmft"}


class DataFormatError(ValueError):
    pass


# -- interactions ----------------------------------------------------------------

def parse_interactions(text: str, source: str = "<string>") -> np.ndarray:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.rstrip("\r\n").split("\t")
        if len(fields) != 2:
            raise DataFormatError(f"{source}:{lineno}: expected 'user<TAB>item', got {line!r}")
        try:
            u, i = int(fields[0]), int(fields[1])
        except ValueError:
            raise DataFormatError(f"{source}:{lineno}: non-integer id in {line!r}") from None
        if u < 0 or i < 0:
            raise DataFormatError(f"{source}:{lineno}: negative id in {line!r}")
        pairs.append((u, i))
    if not pairs:
        raise DataFormatError(f"{source}: no interactions")
    return np.array(pairs, dtype=np.int64)


def load_interactions(path) -> np.ndarray:
    path = Path(path)
    return parse_interactions(path.read_text(encoding="utf-8"), str(path))


def format_interactions(pairs: np.ndarray) -> str:
    return "".join(f"{u}\t{i}\n" for u, i in np.asarray(pairs).reshape(-1, 2))


def write_interactions(path, pairs: np.ndarray) -> None:
    atomic_write(path, format_interactions(pairs).encode())


# -- feature files ---------------------------------------------------------------

def encode_features(features: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise DataFormatError("feature matrix must be 2-D")
    return _FEATURE_HEADER.pack(FEATURE_MAGIC, *arr.shape) + arr.tobytes()


def decode_features(blob: bytes, expected_items: int | None = None, expected_dim: int | None = None,
                    source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _FEATURE_HEADER.size:
        raise DataFormatError(f"{source}: truncated header")
    magic, rows, dim = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"{source}: bad magic {magic!r}")
    if expected_items is not None and rows != expected_items:
        raise DataFormatError(f"{source}: {rows} rows, expected {expected_items}")
    if expected_dim is not None and dim != expected_dim:
        raise DataFormatError(f"{source}: dim {dim}, expected {expected_dim}")
    payload = len(blob) - _FEATURE_HEADER.size
    if payload != rows * dim * 4:
        raise DataFormatError(f"{source}: payload is {payload} bytes, expected {rows * dim * 4}")
    arr = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(rows, dim)
    return arr.astype(np.float64)


def load_features(path, expected_items: int | None = None, expected_dim: int | None = None) -> np.ndarray:
    path = Path(path)
    return decode_features(path.read_bytes(), expected_items, expected_dim, str(path))


def write_features(path, features: np.ndarray) -> None:
    atomic_write(path, encode_features(features))


# -- preparation -------------------------------------------------------------------

def remap(pairs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense ids; returns ``(pairs, user_ids, item_ids)`` with original ids by new index."""
    users, u_new = np.unique(pairs[:, 0], return_inverse=True)
    items, i_new = np.unique(pairs[:, 1], return_inverse=True)
    return np.column_stack([u_new, i_new]).astype(np.int64), users, items


def prepare_dataset(pairs: np.ndarray, features: dict[str, np.ndarray], seed: int) -> tuple[Dataset, dict]:
    """Split per user, drop items absent from training, and remap ids densely.

    Feature rows are indexed by raw item id and are reordered to match.
    """
    train, valid, test = split_interactions(pairs, seed)
    kept_items = np.unique(train[:, 1])
    dropped = np.setdiff1d(np.unique(np.concatenate([valid[:, 1], test[:, 1]])), kept_items)
    if len(dropped):
        logger.info("dropping %d items with no training interactions", len(dropped))
    kept_users = np.unique(train[:, 0])
    user_index = {int(u): k for k, u in enumerate(kept_users)}
    item_index = {int(i): k for k, i in enumerate(kept_items)}

    def convert(part):
        keep = np.isin(part[:, 1], kept_items)
        part = part[keep]
        return np.array([(user_index[int(u)], item_index[int(i)]) for u, i in part], dtype=np.int64).reshape(-1, 2)

    feats = {}
    for name, arr in features.items():
        if len(arr) <= kept_items.max():
            raise DataFormatError(f"{name} features have {len(arr)} rows but item id {kept_items.max()} is used")
        feats[name] = np.asarray(arr, dtype=np.float64)[kept_items]
    dataset = Dataset(len(kept_users), len(kept_items), convert(train), convert(valid), convert(test), feats)
    manifest = {
        "users": [int(u) for u in kept_users],
        "items": [int(i) for i in kept_items],
        "n_train": len(dataset.train),
        "n_valid": len(dataset.valid),
        "n_test": len(dataset.test),
        "seed": seed,
    }
    return dataset, manifest


def save_prepared(out_dir, dataset: Dataset, manifest: dict) -> None:
    out = Path(out_dir)
    write_interactions(out / "train.tsv", dataset.train)
    write_interactions(out / "valid.tsv", dataset.valid)
    write_interactions(out / "test.tsv", dataset.test)
    for name, arr in dataset.features.items():
        write_features(out / MODALITY_FILES[name], arr)
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())


def load_prepared(out_dir) -> Dataset:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    n_users, n_items = len(manifest["users"]), len(manifest["items"])

    def read(name):
        path = out / name
        text = path.read_text(encoding="utf-8")
        return parse_interactions(text, str(path)) if text.strip() else np.empty((0, 2), dtype=np.int64)

    feats = {}
    for name, fname in MODALITY_FILES.items():
        if (out / fname).exists():
            feats[name] = load_features(out / fname, n_items)
    return Dataset(n_users, n_items, read("train.tsv"), read("valid.tsv"), read("test.tsv"), feats)


# -- synthetic planted-block data ------------------------------------------------------

def block_of(index: np.ndarray, n: int, blocks: int) -> np.ndarray:
    return (np.asarray(index) * blocks) // n


def synth_dataset(cfg: SynthConfig, min_interactions: int = 3, max_retries: int = 1000):
    """Planted-community interactions with block-informative modality features.

    Returns ``(pairs, {"visual": ..., "textual": ...}, meta)``.
    """
    if cfg.blocks < 1 or not 0.0 <= cfg.noise < 1.0:
        raise ConfigError("synth needs blocks >= 1 and 0 <= noise < 1")
    rng = np.random.default_rng([cfg.seed, 42])
    user_block = block_of(np.arange(cfg.users), cfg.users, cfg.blocks)
    item_block = block_of(np.arange(cfg.items), cfg.items, cfg.blocks)
    same = user_block[:, None] == item_block[None, :]
    prob = np.where(same, cfg.within, cfg.noise)
    rows = []
    retries = 0
    for u in range(cfg.users):
        for _ in range(max_retries):
            hit = np.flatnonzero(rng.random(cfg.items) < prob[u])
            if len(hit) >= min_interactions:
                break
            retries += 1
        else:
            raise ConfigError(f"user {u} never reached {min_interactions} interactions")
        rows.append(np.column_stack([np.full(len(hit), u), hit]))
    if retries:
        logger.info("synth: %d resampled user rows", retries)
    pairs = np.concatenate(rows).astype(np.int64)

    features = {}
    for name, dim, jitter in (("visual", cfg.visual_dim, cfg.visual_jitter), ("textual", cfg.textual_dim, cfg.textual_jitter)):
        centroids = rng.normal(size=(cfg.blocks, dim))
        features[name] = centroids[item_block] + jitter * rng.normal(size=(cfg.items, dim))
    meta = {"config": asdict(cfg), "n_pairs": int(len(pairs)), "retries": retries,
            "user_block": user_block.tolist(), "item_block": item_block.tolist()}
    return pairs, features, meta


def write_synth(out_dir, cfg: SynthConfig) -> dict:
    pairs, features, meta = synth_dataset(cfg)
    out = Path(out_dir)
    write_interactions(out / "interactions.tsv", pairs)
    for name, arr in features.items():
        write_features(out / MODALITY_FILES[name], arr)
    atomic_write(out / "synth_manifest.json", json.dumps(meta, sort_keys=True).encode())
    return meta
