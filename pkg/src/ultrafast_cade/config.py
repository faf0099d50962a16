"""Experiment configuration: nested sections, strict keys, file + override merging.

Precedence is command-line flags > ``--set`` overrides > config file > defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .anchors import AnchorConfig
from .detector import ConfigError as NetworkConfigError
from .detector import NetworkConfig
from .evaluation import METRICS
from .losses import LossConfig
from .phantom import PhantomConfig
from .training import TrainConfig

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    try:
        import tomli as tomllib
    except ModuleNotFoundError:
        tomllib = None


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
        self.message = message


@dataclass
class EvaluationSettings:
    overlap_threshold: float = 0.2
    criterion: str = "iou"
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    max_detections: int = 100
    n_bootstrap: int = 1000
    ci_level: float = 0.95
    metrics: list[str] = field(default_factory=lambda: list(METRICS))

    def __post_init__(self):
        if self.criterion not in ("iou", "iogt"):
            raise ValueError(f"criterion must be 'iou' or 'iogt', got {self.criterion!r}")
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}")
        if not 0.0 < self.overlap_threshold <= 1.0:
            raise ValueError("overlap_threshold must lie in (0, 1]")


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


# sections that are themselves dataclasses; everything else is a leaf value
NESTED = {
    ExperimentConfig: {
        "network": NetworkConfig,
        "loss": LossConfig,
        "train": TrainConfig,
        "phantom": PhantomConfig,
        "evaluation": EvaluationSettings,
    },
    NetworkConfig: {"anchors": AnchorConfig},
}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a table, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    nested = NESTED.get(cls, {})
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(where, "unknown key")
        kwargs[key] = _build(nested[key], value, where) if key in nested else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError, NetworkConfigError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    text = path.read_text()
    if path.suffix == ".toml":
        if tomllib is None:
            raise ConfigError("", "TOML config needs Python 3.11+ or the tomli package")
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("", f"cannot parse {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value`` -> (["a", "b", "c"], value); value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(key, "empty key component")
    return parts, value


def set_path(data: dict, parts: list[str], value) -> None:
    node = data
    for i, p in enumerate(parts[:-1]):
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(".".join(parts[: i + 1]), "is a value, not a section")
        node = nxt
    node[parts[-1]] = value


def resolve_config(path=None, overrides=(), flags: dict | None = None) -> ExperimentConfig:
    """Merge defaults, an optional file, ``--set`` overrides and explicit flags."""
    data = read_config_file(path) if path else {}
    for text in overrides:
        set_path(data, *parse_override(text))
    for dotted, value in (flags or {}).items():
        if value is not None:
            set_path(data, dotted.split("."), value)
    return config_from_dict(data)


def write_resolved(config: ExperimentConfig, run_dir) -> Path:
    from .io import write_json

    path = Path(run_dir) / "config.resolved.json"
    write_json(path, config.to_dict())
    return path
