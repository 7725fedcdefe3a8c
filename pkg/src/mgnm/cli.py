"""Command line entry point: ``mgnm <command> --config <path> [--set key=value]...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import (
    DataFormatError,
    MODALITY_FILES,
    load_features,
    load_interactions,
    load_prepared,
    prepare_dataset,
    save_prepared,
    synth_dataset,
    write_features,
    write_interactions,
)
from .config import ConfigError, RunConfig
from .graph import GraphError
from .trainer import (
    SELECTION_K,
    CheckpointError,
    TrainingError,
    atomic_write,
    build_model,
    fit,
    load_checkpoint,
    save_checkpoint,
    test_report,
    validation_report,
)

logger = logging.getLogger("mgnm")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, DataFormatError, GraphError, CheckpointError, TrainingError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgnm", description="Multimodal graph recommender: prepare, train, evaluate, synth.")
    parser.add_argument("command", choices=("prepare", "train", "evaluate", "synth"))
    parser.add_argument("--config", help="key=value config file (defaults apply when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set loss.beta=1e-4 (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return parser


# -- commands ----------------------------------------------------------------------

def prepared_dir(cfg: RunConfig) -> Path:
    return cfg.output_dir / "prepared"


def cmd_synth(cfg: RunConfig) -> dict:
    pairs, features, meta = synth_dataset(cfg.synth)
    write_interactions(cfg.data.interactions, pairs)
    write_features(cfg.data.visual, features["visual"])
    write_features(cfg.data.textual, features["textual"])
    manifest = Path(cfg.data.interactions).with_name("synth_manifest.json")
    atomic_write(manifest, json.dumps(meta, sort_keys=True).encode())
    print(f"synth: wrote {meta['n_pairs']} interactions to {cfg.data.interactions}")
    return meta


def _source_features(cfg: RunConfig) -> dict[str, np.ndarray]:
    paths = {"visual": cfg.data.visual, "textual": cfg.data.textual}
    needed = cfg.train.local.modality_names
    return {name: load_features(paths[name]) for name in MODALITY_FILES if name in needed or Path(paths[name]).exists()}


def cmd_prepare(cfg: RunConfig):
    pairs = load_interactions(cfg.data.interactions)
    features = _source_features(cfg)
    dataset, manifest = prepare_dataset(pairs, features, cfg.train.seed)
    manifest["source"] = {"interactions": str(cfg.data.interactions)}
    save_prepared(prepared_dir(cfg), dataset, manifest)
    print(f"prepare: {dataset.n_users} users, {dataset.n_items} items, "
          f"{len(dataset.train)}/{len(dataset.valid)}/{len(dataset.test)} train/valid/test -> {prepared_dir(cfg)}")
    return dataset


def _load_or_prepare(cfg: RunConfig):
    manifest = prepared_dir(cfg) / "manifest.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        # reuse only if the split was made from the same source and seed
        if meta.get("seed") == cfg.train.seed and meta.get("source", {}).get("interactions") == str(cfg.data.interactions):
            return load_prepared(prepared_dir(cfg))
    return cmd_prepare(cfg)


def _write_reports(out: Path, stem: str, report) -> None:
    atomic_write(out / f"{stem}.txt", report.to_table().encode())
    atomic_write(out / f"{stem}.kv", report.to_kv().encode())


def cmd_train(cfg: RunConfig):
    dataset = _load_or_prepare(cfg)
    train_cfg = cfg.train
    result = fit(dataset, train_cfg)
    out = cfg.output_dir
    fp = train_cfg.fingerprint()
    save_checkpoint(out / "model.ckpt", result.params, result.state, fp)
    atomic_write(out / "config.txt", cfgmod.dumps(cfg).encode())
    log_lines = [json.dumps({"epoch": e.epoch, "losses": e.losses, "total": e.total,
                             "valid_recall@20": e.valid_recall, "seconds": e.seconds}) for e in result.log]
    atomic_write(out / "train_log.jsonl", ("\n".join(log_lines) + "\n").encode())
    report = test_report(result.model, result.params, dataset, train_cfg.eval_ks, fp.hex())
    report.extra.update(best_epoch=str(result.best_epoch), valid_recall_at_20=repr(result.best_metric),
                        epochs=str(len(result.log)))
    _write_reports(out, "report", report)
    print(report.to_table(), end="")
    print(f"best epoch {result.best_epoch}: valid recall@{SELECTION_K}={result.best_metric!r}")
    return report


def cmd_evaluate(cfg: RunConfig):
    dataset = _load_or_prepare(cfg)
    train_cfg = cfg.train
    fp = train_cfg.fingerprint()
    params, _ = load_checkpoint(cfg.output_dir / "model.ckpt", fp)
    model = build_model(dataset, train_cfg)
    expected = model.parameter_shapes()
    if {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError("checkpoint tensors do not match the configured model")
    valid = validation_report(model, params, dataset, fingerprint=fp.hex()).recall[SELECTION_K]
    report = test_report(model, params, dataset, train_cfg.eval_ks, fp.hex())
    report.extra["valid_recall_at_20"] = repr(valid)
    _write_reports(cfg.output_dir, "evaluate", report)
    print(report.to_table(), end="")
    print(f"valid recall@{SELECTION_K}={valid!r}")
    return report


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate, "synth": cmd_synth}


def _describe(exc: BaseException) -> str:
    module = type(exc).__module__
    where = module if module.startswith("mgnm") else "mgnm"
    return f"{where}: {type(exc).__name__}: {exc}"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mgnm: usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.overrides)
        COMMANDS[args.command](cfg)
    except USER_ERRORS as exc:
        print(_describe(exc), file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # anything else is a bug
        logger.exception("internal error")
        print(_describe(exc), file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
