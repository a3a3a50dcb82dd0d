"""Plain-text run configuration: ``section.key = value`` lines.

Every command writes its fully resolved configuration (defaults included)
next to its outputs, and rerunning from that file reproduces the outputs
byte for byte. Floats are serialized with repr so they round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError


@dataclass
class TilingSection:
    tile_size: int = 518
    r_threshold: float = 0.1
    positive_class: str = "rumex"
    combine: str = "max"


@dataclass
class SplitSection:
    mode: str = "per_subset"
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class ModelSection:
    input_dim: int = 16
    hidden_dims: tuple[int, ...] = (32,)
    feature_dim: int = 16
    unfreeze: int = 2
    adaptation: str = "none"
    lora_rank: int = 8
    lora_alpha: Optional[float] = None
    dropout: float = 0.3


@dataclass
class TrainingSection:
    strategy: str = "vanilla"
    lam: float = 0.5
    epochs: int = 20
    warmup: int = 5
    batch_size: int = 64
    lr: float = 0.001
    optimizer: str = "adam"
    seed: int = 0
    class_weights: Optional[tuple[float, float]] = None


@dataclass
class SynthSection:
    sources: int = 3
    dim: int = 16
    samples: int = 2000
    positive_fraction: float = 0.2
    target_shift: float = 4.5
    noise_sigma: float = 0.1
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class EvaluationSection:
    window: int = 10


@dataclass
class RunConfig:
    tiling: TilingSection = field(default_factory=TilingSection)
    split: SplitSection = field(default_factory=SplitSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    synth: SynthSection = field(default_factory=SynthSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)


# serialized key <-> attribute name; "lambda" is a keyword in python
_RENAMED = {("training", "lam"): "lambda"}
_SECTIONS = ("tiling", "split", "model", "training", "synth", "evaluation")


def _encode(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_encode(v) for v in value)
    return str(value)


def _decode(text: str, annotation: str, key: str):
    text = text.strip()
    if annotation in ("Optional[float]", "Optional[tuple[float, float]]") and text == "none":
        return None
    try:
        if annotation == "int":
            return int(text)
        if annotation in ("float", "Optional[float]"):
            return float(text)
        if annotation == "str":
            return text
        if annotation == "tuple[int, ...]":
            return tuple(int(v) for v in text.split(",") if v != "")
        if annotation == "Optional[tuple[float, float]]":
            parts = [float(v) for v in text.split(",")]
            if len(parts) != 2:
                raise ValueError("expected two comma-separated weights")
            return tuple(parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
    raise ConfigError(f"unhandled config type {annotation!r} for {key}")


def to_text(config: RunConfig) -> str:
    lines = []
    for section_name in _SECTIONS:
        section = getattr(config, section_name)
        for f in fields(section):
            key = _RENAMED.get((section_name, f.name), f.name)
            lines.append(f"{section_name}.{key} = {_encode(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> RunConfig:
    config = RunConfig()
    lookup = {}
    for section_name in _SECTIONS:
        section = getattr(config, section_name)
        for f in fields(section):
            key = _RENAMED.get((section_name, f.name), f.name)
            lookup[f"{section_name}.{key}"] = (section, f.name, f.type)
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in lookup:
            raise ConfigError(f"line {line_no}: unknown config key {key!r}")
        section, attr, annotation = lookup[key]
        setattr(section, attr, _decode(value, annotation, key))
    return config


def write_config(config: RunConfig, path) -> None:
    Path(path).write_text(to_text(config))


def read_config(path) -> RunConfig:
    return from_text(Path(path).read_text())
