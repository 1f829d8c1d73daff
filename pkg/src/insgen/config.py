"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import OP_KINDS, AugmentConfig
from .contrastive import ContrastiveConfig
from .losses import LossWeights

ENV_PREFIX = "INSGEN_"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "ring"          # ring | grid | table
    path: str | None = None     # CSV file for kind=table
    modes: int = 8
    radius: float = 2.0
    side: int = 5
    spacing: float = 1.0
    sigma: float = 0.05
    count: int = 4096
    seed: int = 0
    subsample: int | None = 256
    mirror: bool = True


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 2
    g_hidden: tuple = (64, 64, 64)
    d_hidden: tuple = (64, 64, 64)
    feat_dim: int = 64
    proj_dim: int = 32
    slope: float = 0.2


@dataclass(frozen=True)
class AugmentSection:
    ops: tuple = AugmentConfig().ops
    p: float = 0.0
    adaptive: bool = True
    target: float = 0.6
    step_size: float = 0.01
    p_max: float = 0.8
    window: int = 4

    def pipeline(self, p: float | None = None) -> AugmentConfig:
        return AugmentConfig(self.ops, self.p if p is None else p)


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 20000
    batch: int = 64
    lr_d: float = 2.5e-3
    lr_g: float = 2.5e-3
    adam_betas: tuple = (0.0, 0.99)
    ema_decay: float = 0.999
    momentum_alpha: float = 0.999
    d_steps_per_g: int = 1
    seed: int = 0
    eval_every: int = 500
    ckpt_every: int = 5000


@dataclass(frozen=True)
class EvalConfig:
    samples: int = 2048
    hq_radius_mult: float = 3.0


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return to_dict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def override(self, assignments) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, else as text."""
        data = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(item, "override must look like section.key=value")
            key, raw = item.split("=", 1)
            _set_path(data, key.strip(), _parse_value(raw))
        return from_dict(data)

    def validate(self):
        _validate(self)
        return self


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_path(data, dotted, value):
    parts = dotted.split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(".".join(parts[: i + 1]), "unknown key")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(dotted, "unknown key")
    node[parts[-1]] = value


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_dict(v) for v in obj]
    return obj


def _coerce(value, hint, path):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if hint is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(where, "unknown key")
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(value, hints[key], where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path or "config", str(exc)) from None


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path=None, overrides=(), environ=None) -> RunConfig:
    """Defaults, then the JSON file, then ``INSGEN_SECTION__KEY`` env vars, then overrides."""
    data = RunConfig().to_dict()
    if path is not None:
        path = Path(path)
        try:
            loaded = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top level must be a mapping")
        for section, values in loaded.items():
            if section not in data:
                raise ConfigError(section, "unknown section")
            if not isinstance(values, dict):
                raise ConfigError(section, "expected a mapping")
            for key, value in values.items():
                if key not in data[section]:
                    raise ConfigError(f"{section}.{key}", "unknown key")
                data[section][key] = value
    env = os.environ if environ is None else environ
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        _set_path(data, dotted, _parse_value(env[name]))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, raw = item.split("=", 1)
        _set_path(data, key.strip(), _parse_value(raw))
    return from_dict(data)


def _validate(cfg: RunConfig):
    ds = cfg.dataset
    if ds.kind not in ("ring", "grid", "table"):
        raise ConfigError("dataset.kind", f"expected ring, grid or table, got {ds.kind!r}")
    if ds.kind == "table" and not ds.path:
        raise ConfigError("dataset.path", "required when dataset.kind is 'table'")
    if ds.subsample is not None and ds.subsample < 1:
        raise ConfigError("dataset.subsample", "must be positive")
    for name in ("latent_dim", "feat_dim", "proj_dim"):
        if getattr(cfg.model, name) < 1:
            raise ConfigError(f"model.{name}", "must be positive")
    for name in ("g_hidden", "d_hidden"):
        if any((not isinstance(h, int)) or h < 1 for h in getattr(cfg.model, name)):
            raise ConfigError(f"model.{name}", "layer widths must be positive integers")
    tr = cfg.trainer
    if tr.steps < 0:
        raise ConfigError("trainer.steps", "must be non-negative")
    if tr.batch < 1:
        raise ConfigError("trainer.batch", "must be positive")
    if not 0.0 <= tr.ema_decay < 1.0:
        raise ConfigError("trainer.ema_decay", "must lie in [0, 1)")
    if not 0.0 <= tr.momentum_alpha <= 1.0:
        raise ConfigError("trainer.momentum_alpha", "must lie in [0, 1]")
    if len(tr.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in tr.adam_betas):
        raise ConfigError("trainer.adam_betas", "expected two numbers in [0, 1)")
    if tr.eval_every < 1 or tr.ckpt_every < 1 or tr.d_steps_per_g < 1:
        raise ConfigError("trainer", "eval_every, ckpt_every and d_steps_per_g must be positive")
    aug = cfg.augment
    for i, op in enumerate(aug.ops):
        if len(op) != 2 or op[0] not in OP_KINDS:
            raise ConfigError(f"augment.ops[{i}]", f"expected [kind, amount] with kind in {OP_KINDS}")
    if not 0.0 <= aug.p_max <= 1.0 or not 0.0 <= aug.p <= 1.0:
        raise ConfigError("augment.p", "probabilities must lie in [0, 1]")
    if aug.window < 1:
        raise ConfigError("augment.window", "must be positive")
    if cfg.eval.samples < 2:
        raise ConfigError("eval.samples", "must be at least 2")


_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _schema_for(hint):
    if dataclasses.is_dataclass(hint):
        hints = typing.get_type_hints(hint)
        return {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: _schema_for(hints[f.name]) for f in dataclasses.fields(hint)},
        }
    args = typing.get_args(hint)
    if type(None) in args:
        inner = [a for a in args if a is not type(None)][0]
        return {"anyOf": [_schema_for(inner), {"type": "null"}]}
    if hint is tuple:
        return {"type": "array"}
    return {"type": _JSON_TYPES[hint]}


def config_schema() -> dict:
    """JSON Schema of the run config file."""
    schema = _schema_for(RunConfig)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "insgen run config"
    return schema
