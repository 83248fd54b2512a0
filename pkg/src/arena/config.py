"""Experiment configuration: nested dataclasses loaded from JSON with strict keys.

Dotted overrides (``prox.lambda=0.1``) are applied to the raw dict before
validation, so a typo in either the file or an override is a hard error.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .adapters import STRATEGIES
from .errors import ConfigError
from .prox_optimizer import AdamWConfig, ProxConfig

__all__ = [
    "TaskSpec",
    "ModelSpec",
    "AdapterSpec",
    "TrainSpec",
    "EvalSpec",
    "ExperimentConfig",
    "load_config",
    "apply_overrides",
    "config_schema",
]


@dataclass
class TaskSpec:
    family: str = "planted_rank"
    K: int = 10
    mode: str = "base"
    # planted-rank family
    m: int = 32
    n: int = 32
    r_star: int = 2
    noise_sigma: float = 0.25
    spectrum: str = "flat"
    query_size: int = 256
    # segmentation family
    n_classes: int = 2
    n_query: int = 8
    image_noise: float = 0.1


@dataclass
class ModelSpec:
    # None: "linear" for planted-rank tasks, "mlp" for segmentation
    kind: str | None = None
    hidden: int = 32
    pretrain_seed: int = 0
    pretrain_epochs: int = 2
    pretrain_examples: int = 2048


@dataclass
class AdapterSpec:
    # None picks the strategy's natural form: gated for arena, vanilla for lora
    mode: str | None = None
    r_init: int = 8
    scaling: float = 1.0
    gate_init: str = "uniform"


@dataclass
class TrainSpec:
    # images (segmentation) or columns (planted) per step; None = full support
    batch_size: int | None = None
    early_stop: bool = True
    window: int = 20
    threshold: float = 0.01


@dataclass
class EvalSpec:
    eps_rank: float = 1e-3
    dice_threshold: float = 0.5


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    strategy: str = "arena"
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    prox: ProxConfig = field(default_factory=ProxConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seeds: list = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: unknown {self.strategy!r}; expected one of {list(STRATEGIES)}")
        t = self.task
        if t.family not in ("planted_rank", "segmentation"):
            raise ConfigError(f"task.family: unknown {t.family!r}")
        if t.mode not in ("base", "novel"):
            raise ConfigError(f"task.mode: unknown {t.mode!r}")
        if t.K < 1:
            raise ConfigError(f"task.K: must be >= 1, got {t.K}")
        if t.family == "planted_rank":
            if not 0 <= t.r_star <= min(t.m, t.n):
                raise ConfigError(f"task.r_star: must lie in [0, {min(t.m, t.n)}], got {t.r_star}")
            if self.model.kind not in (None, "linear"):
                raise ConfigError("model.kind: planted_rank tasks use the 'linear' model")
            if t.mode != "base":
                raise ConfigError("task.mode: planted_rank tasks have no head and run in 'base' mode")
        elif self.model.kind not in (None, "mlp", "attention"):
            raise ConfigError(f"model.kind: segmentation needs 'mlp' or 'attention', got {self.model.kind!r}")
        a = self.adapter
        if a.mode not in (None, "gated", "vanilla"):
            raise ConfigError(f"adapter.mode: unknown {a.mode!r}")
        if self.strategy == "arena" and a.mode == "vanilla":
            raise ConfigError("adapter.mode: arena needs gated adapters")
        if a.r_init < 1:
            raise ConfigError(f"adapter.r_init: must be >= 1, got {a.r_init}")
        if not a.scaling > 0:
            raise ConfigError(f"adapter.scaling: must be > 0, got {a.scaling}")
        if a.gate_init not in ("uniform", "ones"):
            raise ConfigError(f"adapter.gate_init: unknown {a.gate_init!r}")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        if self.train.batch_size is not None and self.train.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1 or null")

    @property
    def model_kind(self):
        if self.model.kind is not None:
            return self.model.kind
        return "linear" if self.task.family == "planted_rank" else "mlp"

    @property
    def adapter_mode(self):
        if self.strategy not in ("lora", "arena"):
            return None
        if self.adapter.mode is not None:
            return self.adapter.mode
        return "gated" if self.strategy == "arena" else "vanilla"

    def to_dict(self):
        d = asdict(self)
        d["prox"]["lambda"] = d["prox"].pop("lam")
        return d

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "")


_NESTED = {
    ExperimentConfig: {
        "task": TaskSpec, "model": ModelSpec, "adapter": AdapterSpec,
        "prox": ProxConfig, "train": TrainSpec, "eval": EvalSpec,
    },
    ProxConfig: {"adamw": AdamWConfig},
}
_ALIASES = {ProxConfig: {"lambda": "lam"}}


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
    aliases = _ALIASES.get(cls, {})
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        attr = aliases.get(key, key)
        if attr not in names:
            raise ConfigError(f"{prefix}{key}: unknown key")
        sub = _NESTED.get(cls, {}).get(attr)
        kwargs[attr] = _build(sub, value, f"{prefix}{key}.") if sub else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data, overrides):
    """Apply ``key.path=value`` strings to a raw config dict (copy returned)."""
    out = copy.deepcopy(data)
    defaults = ExperimentConfig().to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node, ref = out, defaults
        for i, part in enumerate(parts):
            if not isinstance(ref, dict) or part not in ref:
                raise ConfigError(f"{key}: unknown key")
            if i == len(parts) - 1:
                node[part] = _parse_value(text)
            else:
                node = node.setdefault(part, {})
                ref = ref[part]
    return out


def load_config(path, overrides=()):
    """Read a JSON config file, apply overrides and validate."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))


_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean", list: "array"}


def config_schema():
    """JSON schema of the config file, derived from the dataclass defaults."""

    def node(cls):
        props = {}
        inst = cls()
        aliases = {v: k for k, v in _ALIASES.get(cls, {}).items()}
        for f in fields(cls):
            sub = _NESTED.get(cls, {}).get(f.name)
            if sub:
                props[aliases.get(f.name, f.name)] = node(sub)
                continue
            default = getattr(inst, f.name)
            kind = _JSON_TYPES.get(type(default))
            spec = {"default": default}
            if kind:
                spec["type"] = [kind, "null"] if default is None else kind
            props[aliases.get(f.name, f.name)] = spec
        return {"type": "object", "additionalProperties": False, "properties": props}

    schema = node(ExperimentConfig)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["properties"]["strategy"]["enum"] = list(STRATEGIES)
    return schema
