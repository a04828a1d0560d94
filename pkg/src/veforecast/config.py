"""Experiment configuration: TOML files, flag overrides, lossless round-trips.

Values merge with flag > file > default precedence. Keys are dotted
section.name pairs with fixed names; unknown keys are rejected with the
offending key in the message. The resolved configuration can be written back
as TOML and reloading it reproduces the same ExperimentConfig.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Optional

try:  # stdlib from 3.11, the backport before that
    import tomllib
except ImportError:  # pragma: no cover - depends on interpreter version
    import tomli as tomllib

from .data import SplitSpec
from .errors import ConfigError
from .models import ModelConfig
from .training import TrainConfig

SPLITS_BY_KIND = {
    "ett": SplitSpec(0.6, 0.2, 0.2),
    "large": SplitSpec(0.7, 0.1, 0.2),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment, fully resolved."""

    dataset_path: Optional[str] = None
    dataset_kind: str = "ett"
    backbone: str = "linear"
    kernel: int = 25
    cutoff: Optional[int] = None
    use_revin: bool = True
    variant: str = "ci"
    k: int = 4
    p: float = 1.0
    seed: int = 2021
    epochs: int = 10
    lr: float = 5e-3
    batch: int = 32
    head_lr: Optional[float] = None
    lookback: int = 360
    horizon: int = 96
    out_dir: str = "runs"
    k_set: tuple = (2, 4, 8, 16, 32, 64, 128)
    p_set: tuple = (0.25, 1.0, 4.0)
    seeds: tuple = (2021, 2022, 2023)

    def __post_init__(self):
        if self.dataset_kind not in SPLITS_BY_KIND:
            raise ConfigError(
                f"dataset.kind must be one of {sorted(SPLITS_BY_KIND)}, got {self.dataset_kind!r}"
            )

    def split_spec(self) -> SplitSpec:
        return SPLITS_BY_KIND[self.dataset_kind]

    def model_config(self, channels: int) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone,
            L=self.lookback,
            H=self.horizon,
            C=channels,
            variant=self.variant,
            k=self.k,
            p=self.p,
            kernel=self.kernel,
            cutoff=self.cutoff,
            use_revin=self.use_revin,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch,
            learning_rate=self.lr,
            seed=self.seed,
            L=self.lookback,
            H=self.horizon,
            head_lr=self.head_lr,
        )


def _int_tuple(v):
    return tuple(int(x) for x in v)


def _float_tuple(v):
    return tuple(float(x) for x in v)


# dotted key -> (dataclass field, coercion)
KEY_TO_FIELD = {
    "dataset.path": ("dataset_path", str),
    "dataset.kind": ("dataset_kind", str),
    "model.backbone": ("backbone", str),
    "model.kernel": ("kernel", int),
    "model.cutoff": ("cutoff", int),
    "model.revin": ("use_revin", bool),
    "head.variant": ("variant", str),
    "head.k": ("k", int),
    "head.p": ("p", float),
    "train.seed": ("seed", int),
    "train.epochs": ("epochs", int),
    "train.lr": ("lr", float),
    "train.batch": ("batch", int),
    "train.head_lr": ("head_lr", float),
    "window.lookback": ("lookback", int),
    "window.horizon": ("horizon", int),
    "output.dir": ("out_dir", str),
    "grid.k_set": ("k_set", _int_tuple),
    "grid.p_set": ("p_set", _float_tuple),
    "grid.seeds": ("seeds", _int_tuple),
}

FIELD_TO_KEY = {field: key for key, (field, _) in KEY_TO_FIELD.items()}


def _coerce(key: str, value):
    field, conv = KEY_TO_FIELD[key]
    if conv is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        return field, value
    if isinstance(value, bool):  # bool is an int subclass; never silently coerce
        raise ConfigError(f"{key} must not be a boolean, got {value!r}")
    try:
        return field, conv(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} has an invalid value {value!r}: {exc}") from None


def flatten_toml(raw: Mapping) -> dict:
    """Two-level TOML tables to dotted keys; rejects anything unrecognized."""
    flat = {}
    for section, body in raw.items():
        if not isinstance(body, Mapping):
            raise ConfigError(f"top-level key {section!r} must be a [{section}] table")
        for name, value in body.items():
            key = f"{section}.{name}"
            if key not in KEY_TO_FIELD:
                raise ConfigError(f"unknown configuration key {key!r}")
            flat[key] = value
    return flat


def load_config_file(path) -> dict:
    """Dotted key -> raw value from a TOML file."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from None
    return flatten_toml(raw)


def resolve_config(
    file_values: Optional[Mapping] = None, overrides: Optional[Mapping] = None
) -> ExperimentConfig:
    """Merge dotted-key maps onto the defaults; overrides win over the file."""
    merged = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in KEY_TO_FIELD:
                raise ConfigError(f"unknown configuration key {key!r}")
            if value is None:
                continue
            field, coerced = _coerce(key, value)
            merged[field] = coerced
    return ExperimentConfig(**merged)


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r} to TOML")


def config_to_toml(config: ExperimentConfig) -> str:
    """Sectioned TOML text; None fields are omitted (they mean 'default')."""
    sections: dict[str, list[str]] = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if value is None:
            continue
        key = FIELD_TO_KEY[f.name]
        section, name = key.split(".", 1)
        sections.setdefault(section, []).append(f"{name} = {_toml_scalar(value)}")
    lines = []
    for section, body in sections.items():
        lines.append(f"[{section}]")
        lines.extend(body)
        lines.append("")
    return "\n".join(lines)


def write_config(path, config: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        fh.write(config_to_toml(config))
