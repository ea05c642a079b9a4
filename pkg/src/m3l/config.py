"""Experiment configuration.

All hyperparameters live in three dataclasses nested under
:class:`ExperimentConfig`. Defaults are the full-scale values (60 epochs,
lr 3.5e-4, m=0.2, tau=0.05, margin 0.3, batch 64); the YAML files under
``configs/`` carry the desk-scale overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

MODES = ("baseline", "meta", "meta+metabn")
CLASSIFIERS = ("memory", "fc_global", "fc_parallel")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_domains: int = 4
    ids_per_domain: int = 50
    samples_per_id: int = 20
    input_dim: int = 32
    # operator-norm scale of the per-domain linear distortion
    shift: float = 0.6
    # scale of the per-domain translation
    offset: float = 1.0
    # per-domain nuisance (style) variance injected along random directions
    style: float = 1.0
    noise: float = 0.5
    # identity code in a domain-specific subspace (a within-domain shortcut)
    shortcut: float = 0.0


@dataclass
class EncoderConfig:
    input_dim: int = 32
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    use_metabn_last: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be >= 2")
        if self.input_dim <= 0 or any(h <= 0 for h in self.hidden_dims):
            raise ConfigError("all layer widths must be positive")


@dataclass
class TrainConfig:
    mode: str = "meta+metabn"
    classifier: str = "memory"
    momentum: float = 0.2
    temperature: float = 0.05
    margin: float = 0.3
    P: int = 16
    K: int = 4
    epochs: int = 60
    warmup_epochs: int = 10
    decay_epochs: tuple[int, ...] = (30, 50)
    decay_factor: float = 0.1
    warmup_factor: float = 0.1
    outer_lr: float = 3.5e-4
    inner_lr: float = 3.5e-4
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    inner_eps: float = 1e-8
    first_order: bool = False
    metabn_eps: float = 1e-5
    # force the MetaBN mixing coefficient (None = draw from Beta(1, 1))
    metabn_lambda: float | None = None
    iters_per_epoch: int | None = None
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.betas = tuple(float(b) for b in self.betas)

    @property
    def batch_size(self) -> int:
        return self.P * self.K


@dataclass
class ExperimentConfig:
    name: str = "m3l"
    seed: int = 0
    held_out: int = 3
    # None = every domain except the held-out one
    source_domains: list[int] | None = None
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def sources(self) -> list[int]:
        if self.source_domains is not None:
            return list(self.source_domains)
        return [d for d in range(self.data.n_domains) if d != self.held_out]

    def validate(self) -> "ExperimentConfig":
        t = self.train
        if t.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {t.mode!r}")
        if t.classifier not in CLASSIFIERS:
            raise ConfigError(f"classifier must be one of {CLASSIFIERS}, got {t.classifier!r}")
        if not 0 <= self.held_out < self.data.n_domains:
            raise ConfigError(f"held_out={self.held_out} outside [0, {self.data.n_domains})")
        src = self.sources()
        if self.held_out in src:
            raise ConfigError("held-out domain cannot also be a source domain")
        if len(set(src)) != len(src) or any(not 0 <= d < self.data.n_domains for d in src):
            raise ConfigError(f"invalid source domains {src}")
        if t.mode != "baseline" and len(src) < 2:
            raise ConfigError("meta-learning needs at least 2 source domains")
        if len(src) < 1:
            raise ConfigError("need at least one source domain")
        if t.P < 2 or t.K < 2:
            raise ConfigError("batch-hard triplet mining needs P >= 2 and K >= 2")
        if t.P > self.data.ids_per_domain:
            raise ConfigError(f"P={t.P} exceeds identities per domain ({self.data.ids_per_domain})")
        if not 0.0 <= t.momentum <= 1.0:
            raise ConfigError("memory momentum must lie in [0, 1]")
        if t.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if t.margin < 0:
            raise ConfigError("triplet margin must be non-negative")
        if t.epochs < 1 or t.warmup_epochs < 0:
            raise ConfigError("epochs must be >= 1 and warmup_epochs >= 0")
        if self.encoder.input_dim != self.data.input_dim:
            raise ConfigError("encoder.input_dim must equal data.input_dim")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Short stable hash of the resolved config (used for file naming)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha1(blob).hexdigest()[:10]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / f"{self.name}-{self.digest()}"

    def replace(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"train.mode": "meta"})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(d, key, value)
        # the encoder input follows the data width unless set explicitly
        if "data.input_dim" in overrides and "encoder.input_dim" not in overrides:
            d["encoder"]["input_dim"] = d["data"]["input_dim"]
        return from_dict(d)


def _set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _build(cls, values: dict | None):
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def from_dict(d: dict[str, Any]) -> ExperimentConfig:
    d = dict(d)
    data = _build(DataConfig, d.pop("data", None))
    encoder = d.pop("encoder", None) or {}
    encoder.setdefault("input_dim", data.input_dim)
    enc = _build(EncoderConfig, encoder)
    train = _build(TrainConfig, d.pop("train", None))
    cfg = _build(ExperimentConfig, d)
    cfg.data, cfg.encoder, cfg.train = data, enc, train
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return from_dict(raw)


def parse_override(text: str) -> tuple[str, Any]:
    """Parse ``key=value`` with the value interpreted as YAML."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)
