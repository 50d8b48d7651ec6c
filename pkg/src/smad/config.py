"""Run configuration: dataclass sections, YAML loading, validation, overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .model import ModelConfig, paper_preset
from .nn import ConfigError
from .train import TrainConfig


@dataclass
class DataConfig:
    seed: int = 0
    n_utterances: int = 250
    vocab_size: int = 12
    length_range: tuple[int, int] = (3, 7)
    feat_dim: int = 20
    noise: float = 0.0
    scale_variance: bool = False


@dataclass
class DecodeConfig:
    split: str = "dev"
    beam_width: int = 0
    max_len: int | None = None
    length_penalty: float = 0.6
    checkpoint: str = "best"
    dump_alignment: bool = False


@dataclass
class OutputConfig:
    corpus_dir: str = "corpus"
    run_dir: str = "run"


@dataclass
class AblateConfig:
    seeds: list[int] = field(default_factory=lambda: [0])
    variants: list[str] = field(
        default_factory=lambda: [
            "t_smad",
            "transformer_baseline",
            "no_encoder",
            "no_das",
            "no_mixed_attention",
            "no_modality_specific",
        ]
    )
    jobs: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


_SECTION_TYPES = typing.get_type_hints(RunConfig)


class ConfigFileError(ConfigError):
    """Config file content is invalid; message carries the location."""


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# type checking
# ---------------------------------------------------------------------------

def _check(value, tp, where: str):
    """Return ``value`` coerced to ``tp`` or raise ConfigFileError."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            return _check(value, a, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigFileError(f"{where}: expected a list of {len(args)} values, got {value!r}")
        return tuple(_check(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigFileError(f"{where}: expected a list, got {value!r}")
        return [_check(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigFileError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigFileError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigFileError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigFileError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigFileError(f"{where}: unsupported type {tp}")


def _line_index(text: str) -> dict[tuple[str, ...], int]:
    """Map key paths to 1-based line numbers in a YAML mapping document."""
    index: dict[tuple[str, ...], int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return index

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = (*path, str(k.value))
                index[key] = k.start_mark.line + 1
                walk(v, key)

    if root is not None:
        walk(root, ())
    return index


def from_dict(raw: dict | None, source: str = "<config>", lines: dict | None = None) -> RunConfig:
    raw = raw or {}
    lines = lines or {}

    def loc(*path):
        line = lines.get(tuple(path))
        dotted = ".".join(path)
        return f"{source}:{line}: {dotted}" if line else f"{source}: {dotted}"

    if not isinstance(raw, dict):
        raise ConfigFileError(f"{source}: top level must be a mapping")
    sections = {}
    for name, section in raw.items():
        if name not in _SECTION_TYPES:
            raise ConfigFileError(f"{loc(name)}: unknown section (expected one of {sorted(_SECTION_TYPES)})")
        if section is None:
            continue
        if not isinstance(section, dict):
            raise ConfigFileError(f"{loc(name)}: section must be a mapping")
        cls = _SECTION_TYPES[name]
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, value in section.items():
            if key not in hints:
                raise ConfigFileError(f"{loc(name, key)}: unknown field (expected one of {sorted(hints)})")
            kwargs[key] = _check(value, hints[key], loc(name, key))
        try:
            sections[name] = cls(**kwargs)
        except ConfigError as exc:
            raise ConfigFileError(f"{loc(name)}: {exc}") from exc
    return RunConfig(**sections)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigFileError(f"--set {text!r}: expected section.key=value")
    key, value = text.split("=", 1)
    path = key.strip().split(".")
    if len(path) != 2:
        raise ConfigFileError(f"--set {text!r}: key must be section.field")
    return path, yaml.safe_load(value) if value.strip() else None


def preset_config(name: str) -> dict:
    """Named starting points: ``desk`` (defaults) and ``paper`` (12+6 layers, d_model 256, 25k warmup)."""
    if name == "desk":
        return {}
    if name == "paper":
        return {
            "model": paper_preset().to_dict(),
            "data": {"vocab_size": 4230, "feat_dim": 83},
            "train": {"warmup": 25000},
        }
    raise ConfigFileError(f"unknown preset {name!r} (expected desk or paper)")


def load_config(path=None, overrides=(), preset: str = "desk") -> RunConfig:
    """Start from ``preset``, layer a YAML file (optional) on top, then ``section.key=value`` overrides."""
    raw: dict = {}
    lines: dict = {}
    source = "<defaults>"
    if path is not None:
        text = Path(path).read_text()
        source = str(path)
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigFileError(f"{source}: YAML parse error: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigFileError(f"{source}: top level must be a mapping")
        lines = _line_index(text)
    merged = {k: dict(v) for k, v in preset_config(preset).items()}
    for k, v in raw.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k].update(v)
        else:
            merged[k] = dict(v) if isinstance(v, dict) else v
    for item in overrides:
        (section, key), value = parse_override(item)
        if section not in _SECTION_TYPES:
            raise ConfigFileError(f"--set {item!r}: unknown section {section!r}")
        merged.setdefault(section, {})
        if merged[section] is None:
            merged[section] = {}
        merged[section][key] = value
        lines.pop((section, key), None)
    return from_dict(merged, source, lines)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def config_schema() -> dict:
    """JSON-schema description of the config file, generated from the dataclasses."""

    def schema_of(tp):
        origin, args = typing.get_origin(tp), typing.get_args(tp)
        if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
            return {"anyOf": [schema_of(a) for a in args]}
        if tp is type(None):
            return {"type": "null"}
        if origin is tuple:
            return {"type": "array", "prefixItems": [schema_of(a) for a in args], "minItems": len(args), "maxItems": len(args)}
        if origin is list:
            return {"type": "array", "items": schema_of(args[0])}
        return {"type": {bool: "boolean", int: "integer", float: "number", str: "string"}[tp]}

    props = {}
    for name, cls in _SECTION_TYPES.items():
        hints = typing.get_type_hints(cls)
        defaults = asdict(cls())
        props[name] = {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {**schema_of(t), "default": _plain(defaults[k])} for k, t in hints.items()},
        }
    return {"$schema": "https://json-schema.org/draft/2020-12/schema", "type": "object",
            "additionalProperties": False, "properties": props}
