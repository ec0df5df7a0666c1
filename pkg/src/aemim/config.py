"""Run configuration: nested dataclasses loaded from YAML with strict validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SynthSpec
from .evaluation import ATTACKERS, FinetuneConfig, ProbeConfig
from .mim import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

ENV_PREFIX = "AEMIM__"


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synth"
    synth: SynthSpec = field(default_factory=SynthSpec)
    folder: str | None = None

    def __post_init__(self):
        if self.kind not in ("synth", "folder"):
            raise ValueError(f"kind must be 'synth' or 'folder', got {self.kind!r}")
        if self.kind == "folder" and not self.folder:
            raise ValueError("kind 'folder' needs a folder path")


@dataclass(frozen=True)
class EvalConfig:
    eps_list: tuple[float, ...] = (0.0, 1.0, 2.0, 4.0, 8.0)
    attacker: str = "pgd"
    pgd_steps: int = 20
    max_samples: int | None = None
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def __post_init__(self):
        e = list(self.eps_list)
        if not e or e[0] != 0 or any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError(f"eps_list must start at 0 and strictly increase, got {e}")
        if self.attacker not in ATTACKERS:
            raise ValueError(f"attacker must be one of {ATTACKERS}")
        if self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"
    run_id: str = "run"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.data.kind == "synth" and self.data.synth.image_size != self.model.image_size:
            raise ValueError("data.synth.image_size must equal model.image_size")
        if self.train.mask_ratio != self.model.mask_ratio:
            raise ValueError("train.mask_ratio must equal model.mask_ratio")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id


def _strip_optional(tp):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def _coerce(value, tp, path: str):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: null not allowed")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return build(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def build(cls, values: dict, path: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key {(path + '.' if path else '') + unknown[0]!s}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return conv(cfg)


def serialize(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def _apply_env(values: dict, environ) -> dict:
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__")]
        node = values
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"environment override {key}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return values


def parse_config(source=None, text: str | None = None, environ=None) -> RunConfig:
    """Load a :class:`RunConfig` from a YAML file (or text); env vars override keys.

    ``AEMIM__TRAIN__LAMBDA_RATIO=0.3`` sets ``train.lambda_ratio``.
    """
    if text is None and source is not None:
        try:
            text = Path(source).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {source}: {e}") from None
    try:
        values = yaml.safe_load(text or "") or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    if not isinstance(values, dict):
        raise ConfigError("config must be a mapping at top level")
    values = _apply_env(values, os.environ if environ is None else environ)
    values.setdefault("train", {})
    values.setdefault("model", {})
    # mask ratio is shared; fill whichever side was left implicit
    if "mask_ratio" in values["model"] and "mask_ratio" not in values["train"]:
        values["train"]["mask_ratio"] = values["model"]["mask_ratio"]
    elif "mask_ratio" in values["train"] and "mask_ratio" not in values["model"]:
        values["model"]["mask_ratio"] = values["train"]["mask_ratio"]
    if "image_size" in values["model"]:
        values.setdefault("data", {}).setdefault("synth", {}).setdefault("image_size", values["model"]["image_size"])
    return build(RunConfig, values)


def config_hash(cfg: RunConfig) -> str:
    """Digest of everything that affects results (output location excluded)."""
    d = to_dict(cfg)
    for k in ("output_dir", "run_id", "checkpoint_every"):
        d.pop(k)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()
