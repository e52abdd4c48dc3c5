"""YAML run configuration.

A run is fully determined by (config file, seed). The run seed feeds the
backbone initialization, the synthetic stream and every training RNG, so
the ``backbone`` and ``stream`` sections carry no seed of their own.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from pectp.backbone import BackboneConfig
from pectp.continual import MethodSpec, OptimizerConfig
from pectp.data import StreamSpec
from pectp.retention import OpgConfig

DEFAULT_CONFIG = Path(__file__).with_name("configs") / "default.yaml"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stream: StreamSpec = field(default_factory=StreamSpec)
    method: MethodSpec = field(default_factory=MethodSpec)
    seeds: tuple[int, ...] = (0,)
    out: str = "runs/default"
    checkpoint_every: int = 0  # tasks between checkpoints; 0 -> final checkpoint only

    def backbone_for(self, seed: int) -> BackboneConfig:
        return replace(self.backbone, seed=int(seed))

    def stream_for(self, seed: int) -> StreamSpec:
        return replace(self.stream, seed=int(seed))

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, seeds=(int(seed),))

    def to_dict(self) -> dict[str, Any]:
        backbone = dataclasses.asdict(self.backbone)
        backbone.pop("seed")
        stream = self.stream.to_dict()
        stream.pop("seed")
        return {
            "backbone": backbone,
            "stream": stream,
            "method": self.method.to_dict(),
            "seeds": list(self.seeds),
            "out": self.out,
            "checkpoint_every": self.checkpoint_every,
        }


_SECTIONS = {"backbone", "stream", "method", "seeds", "out", "checkpoint_every"}
_NO_SEED = {"seed"}


def _coerce(path: str, value: Any, hint: Any) -> Any:
    """Check a scalar against its dataclass annotation."""
    text = str(hint)
    if value is None:
        if "None" in text:
            return None
        raise ConfigError(f"{path}: must not be null")
    if text.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return tuple(_coerce(f"{path}[{i}]", v, float if "float" in text else int) for i, v in enumerate(value))
    if hint is bool or text == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int or text.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float or text.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str or text.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, path: str, skip: set[str] = frozenset(), nested: dict | None = None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}"
        if nested and name in nested:
            kwargs[name] = _build(nested[name], value, sub)
        else:
            kwargs[name] = _coerce(sub, value, hints[name])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        # point at the first field the validator's message mentions
        msg = str(exc)
        hits = [(msg.index(n), -len(n), n) for n in names if n in msg]
        where = min(hits)[2] if hits else None
        raise ConfigError(f"{path}.{where}: {exc}" if where else f"{path}: {exc}") from exc


_METHOD_NESTED = {"opg": OpgConfig, "optimizer": OptimizerConfig}


def method_from_dict(data: Any, path: str = "method") -> MethodSpec:
    return _build(MethodSpec, data, path, nested=_METHOD_NESTED)


def config_from_dict(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = sorted(set(data) - _SECTIONS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    for required in ("method", "seeds"):
        if required not in data:
            raise ConfigError(f"{required}: required field is missing")
    backbone = _build(BackboneConfig, data.get("backbone"), "backbone", skip=_NO_SEED)
    stream = _build(StreamSpec, data.get("stream"), "stream", skip=_NO_SEED)
    method = method_from_dict(data["method"])
    seeds = data["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds: expected a nonempty list of integers")
    seeds = tuple(_coerce(f"seeds[{i}]", s, int) for i, s in enumerate(seeds))
    out = _coerce("out", data.get("out", "runs/default"), str)
    every = _coerce("checkpoint_every", data.get("checkpoint_every", 0), int)
    if every < 0:
        raise ConfigError("checkpoint_every: must be >= 0")
    if backbone.image_size != stream.image_size or backbone.channels != stream.channels:
        raise ConfigError("stream.image_size: stream images must match backbone.image_size and backbone.channels")
    return RunConfig(backbone, stream, method, seeds, out, every)


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a YAML config. Raises ConfigError or OSError."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
