"""Run configuration: one dataclass tree, JSON round-trip, dotted overrides,
and a stable content hash that every artifact records."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .encoders import EncoderConfig
from .errors import ConfigError
from .synthetic import SyntheticDatasetSpec
from .training import LossConfig, STRATEGY_ROWS, parse_strategy

CONFIG_SCHEMA = 1


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    strategy: str = "LP+CP&VP"
    seed: int = 0
    steps: int = 400
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    identities_per_batch: int = 8
    samples_per_identity: int = 4
    slot_count: int = 4
    vocab_size: int = 2000
    normalize_similarity: bool = True
    temperature: float = 1.0
    fusion_depth: int = 1
    dataset_dir: str = "data"
    prompts_path: str = "prompts.jsonl"
    captions_path: str | None = None


def to_dict(config) -> dict:
    return dataclasses.asdict(config)


def _coerce(value, target_type):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        lowered = str(value).lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot read {value!r} as a boolean")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if value is None:
        return None
    return str(value)


_NESTED = {"encoder": EncoderConfig, "data": SyntheticDatasetSpec, "loss": LossConfig}


def from_dict(data: dict, cls=RunConfig):
    kwargs = {}
    names = {f.name for f in fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config field {key!r} for {cls.__name__}")
        if cls is RunConfig and key in _NESTED:
            kwargs[key] = _NESTED[key](**value) if isinstance(value, dict) else value
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return from_dict(json.load(fh))


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(config), fh, sort_keys=True, indent=2)


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply ``a.b=value`` strings on top of a config; flags win over file."""
    data = to_dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = data
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"override {dotted!r}: no such section {key!r}")
            node = node[key]
        leaf = keys[-1]
        if leaf not in node:
            raise ConfigError(f"override {dotted!r}: no such field {leaf!r}")
        current = node[leaf]
        target_type = type(current) if current is not None else str
        node[leaf] = _coerce(raw, target_type)
    return from_dict(data)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def validate_config(config: RunConfig, require_paths=()) -> list[str]:
    """Every violation, not just the first; empty list means valid."""
    problems = []
    try:
        config.encoder.validate()
    except ConfigError as exc:
        problems.append(f"encoder: {exc}")
    try:
        config.data.validate()
    except ConfigError as exc:
        problems.append(f"data: {exc}")
    try:
        parse_strategy(config.strategy)
    except ConfigError as exc:
        problems.append(str(exc))
    if config.steps < 1:
        problems.append(f"steps must be >= 1, got {config.steps}")
    if config.learning_rate <= 0:
        problems.append(f"learning_rate must be > 0, got {config.learning_rate}")
    if not (0.0 <= config.warmup_fraction <= 1.0):
        problems.append(f"warmup_fraction outside [0, 1]: {config.warmup_fraction}")
    if config.identities_per_batch < 2:
        problems.append("identities_per_batch must be >= 2 (triplets need negatives)")
    if config.samples_per_identity < 2:
        problems.append("samples_per_identity must be >= 2 (triplets need positives)")
    if config.identities_per_batch > config.data.identities:
        problems.append(
            f"identities_per_batch {config.identities_per_batch} exceeds dataset "
            f"identities {config.data.identities}"
        )
    if config.slot_count < 1 or config.slot_count > config.encoder.context_length - 6:
        problems.append(
            f"slot_count {config.slot_count} outside [1, {config.encoder.context_length - 6}]"
        )
    if config.temperature <= 0:
        problems.append(f"temperature must be > 0, got {config.temperature}")
    if not (0.0 <= config.loss.label_smoothing < 1.0):
        problems.append(f"label_smoothing outside [0, 1): {config.loss.label_smoothing}")
    if config.loss.triplet_margin < 0:
        problems.append(f"triplet_margin must be >= 0, got {config.loss.triplet_margin}")
    minimum_vocab = 512 + 3 + config.slot_count
    if config.vocab_size < minimum_vocab:
        problems.append(f"vocab_size below alphabet+reserved minimum {minimum_vocab}")
    for attr in require_paths:
        path = getattr(config, attr)
        if path is None:
            problems.append(f"{attr} is required for this command")
        elif not os.path.exists(path):
            problems.append(f"{attr} does not exist: {path}")
    return problems


__all__ = [
    "RunConfig",
    "CONFIG_SCHEMA",
    "STRATEGY_ROWS",
    "apply_overrides",
    "config_hash",
    "from_dict",
    "load_config",
    "save_config",
    "to_dict",
    "validate_config",
]
