"""JSON-driven run configuration with strict unknown-key rejection.

A run file has optional sections ``model`` (with ``vit`` and ``head``),
``train``, ``augment``, and ``data``, plus top-level ``seed`` and ``out_dir``.
Every missing field falls back to the library default; any key the schema
does not know is an error, not a warning. The root seed feeds the named
random substreams unless a section pins its own.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig
from .errors import ConfigError, VitGruError
from .head import HeadConfig
from .model import ModelConfig
from .train import TrainConfig
from .vit import ViTConfig

_TUPLE_FIELDS = {"brightness_delta_range", "contrast_factor_range"}


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    split_ratio: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/out"
    seed: int = 0


def _build_dataclass(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {path} must be an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key: {path}.{key}" if path else f"unknown config key: {key}")
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except VitGruError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in config section {path or '<root>'}: {exc}") from exc


def build_run_config(raw: dict) -> RunConfig:
    """Validate a parsed JSON object and fill in all defaults."""
    if not isinstance(raw, dict):
        raise ConfigError(f"run config must be a JSON object, got {type(raw).__name__}")
    known = {"model", "train", "augment", "data", "out_dir", "seed"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")

    model_raw = dict(raw.get("model", {}))
    if not isinstance(model_raw, dict):
        raise ConfigError("config section model must be an object")
    for key in model_raw:
        if key not in {"vit", "head", "dtype"}:
            raise ConfigError(f"unknown config key: model.{key}")
    vit = _build_dataclass(ViTConfig, model_raw.get("vit", {}), "model.vit")
    head = _build_dataclass(HeadConfig, model_raw.get("head", {}), "model.head")
    try:
        model = ModelConfig(vit=vit, head=head, dtype=model_raw.get("dtype", "float32"))
    except VitGruError:
        raise

    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    train_raw = dict(raw.get("train", {}))
    augment_raw = dict(raw.get("augment", {}))
    # the root seed drives every substream unless a section pins its own
    train_raw.setdefault("seed", seed)
    augment_raw.setdefault("seed", seed)
    train = _build_dataclass(TrainConfig, train_raw, "train")
    augment = _build_dataclass(AugmentConfig, augment_raw, "augment")
    data = _build_dataclass(DataConfig, raw.get("data", {}), "data")

    out_dir = raw.get("out_dir", "runs/out")
    if not isinstance(out_dir, str):
        raise ConfigError(f"out_dir must be a string, got {out_dir!r}")
    return RunConfig(model=model, train=train, augment=augment, data=data,
                     out_dir=out_dir, seed=seed)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return build_run_config(raw)


def tiny_verification_config(dtype: str = "float64") -> RunConfig:
    """The built-in desk-scale geometry the gradient checker runs on."""
    return build_run_config(
        {
            "model": {
                "vit": {
                    "image_size": 32, "patch_size": 8, "channels": 3, "d_model": 32,
                    "depth": 2, "heads": 2, "mlp_width": 64, "freeze_n": 1,
                },
                "head": {"d_vit": 32, "d_gru": 16, "num_classes": 3},
                "dtype": dtype,
            }
        }
    )
