"""Run configuration and its ``section.key=value`` text format."""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

MODALITY_TOGGLES = {
    "both": ("visual", "textual"),
    "text": ("textual",),
    "image": ("visual",),
    "none": (),
}


class ConfigError(ValueError):
    pass


@dataclass
class LocalConfig:
    dim: int = 64
    layers: int = 2
    modality_layer: int = 1
    modalities: str = "both"

    def validate(self) -> None:
        if self.dim < 1 or self.layers < 1:
            raise ConfigError("local.dim and local.layers must be >= 1")
        if not 1 <= self.modality_layer <= self.layers:
            raise ConfigError(f"local.modality_layer must be in [1, {self.layers}], got {self.modality_layer}")
        if self.modalities not in MODALITY_TOGGLES:
            raise ConfigError(f"local.modalities must be one of {sorted(MODALITY_TOGGLES)}")

    @property
    def modality_names(self) -> tuple[str, ...]:
        return MODALITY_TOGGLES[self.modalities]


@dataclass
class GlobalConfig:
    hyperedges: int = 4
    depth: int = 2
    dropout: float = 0.2
    tau: float = 0.2
    alpha: float = 0.2

    def validate(self) -> None:
        if self.hyperedges < 1 or self.depth < 1:
            raise ConfigError("global.hyperedges and global.depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("global.dropout must be in [0, 1)")
        if self.tau <= 0 or self.alpha < 0:
            raise ConfigError("global.tau must be > 0 and global.alpha >= 0")


@dataclass
class LossWeights:
    lambda_reg: float = 1e-4
    omega: float = 1e-4
    beta: float = 1e-4
    delta: float = 1e-4

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss.{f.name} must be >= 0")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    eval_ks: tuple[int, ...] = (5, 10, 20, 50)
    weights: LossWeights = field(default_factory=LossWeights)
    local: LocalConfig = field(default_factory=LocalConfig)
    global_: GlobalConfig = field(default_factory=GlobalConfig)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("train.batch_size and train.max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")
        if not self.eval_ks or min(self.eval_ks) < 1:
            raise ConfigError("train.eval_ks must be positive")
        self.weights.validate()
        self.local.validate()
        self.global_.validate()

    def fingerprint(self) -> bytes:
        """8-byte hash of everything that shapes the trained model."""
        text = "\n".join(f"{k}={v}" for k, v in _flatten(self, "train"))
        return hashlib.sha256(text.encode()).digest()[:8]


@dataclass
class DataConfig:
    interactions: str = "data/interactions.tsv"
    visual: str = "data/visual.mmft"
    textual: str = "data/textual.mmft"


@dataclass
class OutputConfig:
    output_dir: str = "runs/default"


@dataclass
class SynthConfig:
    users: int = 200
    items: int = 100
    blocks: int = 4
    noise: float = 0.05
    within: float = 0.5
    visual_dim: int = 64
    textual_dim: int = 32
    visual_jitter: float = 1.5
    textual_jitter: float = 1.0
    seed: int = 0


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: OutputConfig = field(default_factory=OutputConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> None:
        self.train.validate()

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir)


# section name in the file -> attribute path on RunConfig
SECTIONS = {
    "train": ("train",),
    "loss": ("train", "weights"),
    "local": ("train", "local"),
    "global": ("train", "global_"),
    "data": ("data",),
    "run": ("run",),
    "synth": ("synth",),
}


def _flatten(obj, prefix: str):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            continue
        yield f"{prefix}.{f.name}", _format(value)
    for section, path in SECTIONS.items():
        if path[0] == prefix and len(path) == 2:
            yield from _flatten(getattr(obj, path[1]), section)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _target(cfg: RunConfig, key: str):
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}")
    obj = cfg
    for attr in SECTIONS[section]:
        obj = getattr(obj, attr)
    names = {f.name for f in dataclasses.fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))}
    if name not in names:
        raise ConfigError(f"unknown config key {key!r}")
    return obj, name


def set_value(cfg: RunConfig, key: str, raw: str) -> None:
    obj, name = _target(cfg, key.strip())
    setattr(obj, name, _coerce(raw.strip(), getattr(obj, name), key))


def dumps(cfg: RunConfig) -> str:
    lines = []
    for section, path in SECTIONS.items():
        obj = cfg
        for attr in path:
            obj = getattr(obj, attr)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if not dataclasses.is_dataclass(value):
                lines.append(f"{section}.{f.name}={_format(value)}")
    return "\n".join(lines) + "\n"


def loads(text: str, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        entries.append(line)
    for item in list(entries) + list(overrides or []):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        set_value(cfg, key, value)
    return cfg


def load(path: str | os.PathLike | None, overrides: list[str] | None = None, env=os.environ) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    cfg = loads(text, overrides)
    if env.get("MGNM_SEED"):
        set_value(cfg, "train.seed", env["MGNM_SEED"])
    cfg.validate()
    return cfg
