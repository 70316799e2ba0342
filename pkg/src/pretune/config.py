"""Experiment configuration: strict YAML parsing, named profiles and a stable digest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from . import PRETRAIN_STRATEGIES, TUNE_STRATEGIES
from .errors import ConfigError
from .finetune import FinetuneConfig
from .models import DiffusionUNetConfig, DiscriminatorConfig, EncoderDecoderConfig
from .pretrain import PretrainConfig
from .strategies import TuningStrategy
from .volume import GeneratorSettings

PROFILES = ("paper", "desk")


@dataclass
class DataConfig:
    source: str = "synthetic"
    manifest: str | None = None
    n_subjects: int = 596
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    split: tuple[float, float, float] = (0.70, 0.20, 0.10)


@dataclass
class ModelsConfig:
    feature_sizes: tuple[int, ...] = (24, 12)
    encoder: EncoderDecoderConfig = field(default_factory=EncoderDecoderConfig)
    diffusion: DiffusionUNetConfig = field(default_factory=DiffusionUNetConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)


@dataclass
class TuningConfig:
    top_fraction: float = 0.10
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = ("linear",)

    def strategy(self, kind: str) -> TuningStrategy:
        return TuningStrategy(kind, self.top_fraction, self.lora_rank, self.lora_alpha, tuple(self.lora_targets))


@dataclass
class GridConfig:
    pretrain: tuple[str, ...] = PRETRAIN_STRATEGIES
    tune: tuple[str, ...] = TUNE_STRATEGIES
    linear_probe: bool = True


@dataclass
class ExperimentConfig:
    profile: str = "paper"
    seed: int = 0
    out_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    tuning: TuningConfig = field(default_factory=TuningConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def validate(self, check_paths: bool = True) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"profile: unknown profile {self.profile!r}")
        if self.data.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source: must be 'synthetic' or 'manifest', got {self.data.source!r}")
        if self.data.source == "manifest":
            if not self.data.manifest:
                raise ConfigError("data.manifest: required when data.source is 'manifest'")
            if check_paths and not Path(self.data.manifest).exists():
                raise ConfigError(f"data.manifest: {self.data.manifest} does not exist")
        if self.data.n_subjects < 3:
            raise ConfigError("data.n_subjects: need at least 3 subjects")
        if len(self.data.split) != 3 or abs(sum(self.data.split) - 1.0) > 1e-9 or min(self.data.split) < 0:
            raise ConfigError("data.split: three non-negative fractions summing to 1")
        if not self.models.feature_sizes:
            raise ConfigError("models.feature_sizes: grid needs at least one feature size")
        if not self.grid.pretrain or not self.grid.tune:
            raise ConfigError("grid: pretrain and tune lists must be non-empty")
        for name in self.grid.pretrain:
            if name not in PRETRAIN_STRATEGIES:
                raise ConfigError(f"grid.pretrain: unknown strategy {name!r}")
        for name in self.grid.tune:
            if name not in TUNE_STRATEGIES:
                raise ConfigError(f"grid.tune: unknown strategy {name!r}")
        self.data.generator.validate()
        for fs in self.models.feature_sizes:
            replace(self.models.encoder, feature_size=fs).validate()
        self.models.diffusion.validate()
        self.pretrain.validate()
        self.finetune.validate()
        self.tuning.strategy("top")

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    def digest(self) -> str:
        """sha256 of the canonical JSON form; independent of key order in the source file."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# -- strict construction from nested mappings ------------------------------------------


def _coerce(tp: Any, value: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(arg, value, key)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{key}: invalid value {value!r}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {type(value).__name__}")
        return build_dataclass(tp, value, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, f"{key}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def build_dataclass(cls: type, values: dict[str, Any], prefix: str = "", base: Any = None) -> Any:
    """Instantiate ``cls`` from ``values``; unknown keys raise :class:`ConfigError` naming the dotted path.

    Missing keys fall back to ``base`` (when given) or to the class defaults.
    """
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    for k in values:
        if k not in known:
            raise ConfigError(f"unknown key {_join(prefix, k)!r}")
    kwargs = {}
    for name in known:
        key = _join(prefix, name)
        if name in values:
            current = getattr(base, name) if base is not None else None
            if dataclasses.is_dataclass(hints[name]) and isinstance(values[name], dict):
                kwargs[name] = build_dataclass(hints[name], values[name], key, current)
            else:
                kwargs[name] = _coerce(hints[name], values[name], key)
        elif base is not None:
            kwargs[name] = getattr(base, name)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{prefix or cls.__name__}: {exc}") from None


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


# -- profiles --------------------------------------------------------------------------


def paper_profile() -> ExperimentConfig:
    return ExperimentConfig()


def desk_profile() -> ExperimentConfig:
    """CPU-sized stand-in: tiny models, 16^3 patches, 30 subjects of 20^3 voxels, a few epochs."""
    patch = (16, 16, 16)
    pre = PretrainConfig(patch_size=patch, diffusion_patch_size=patch, diffusion_lr=1e-3).with_epochs(6)
    return ExperimentConfig(
        profile="desk",
        data=DataConfig(n_subjects=30, generator=GeneratorSettings(dims=(20, 20, 20))),
        models=ModelsConfig(
            feature_sizes=(6,),
            encoder=EncoderDecoderConfig(
                feature_size=6, input_patch=patch, depths=(2, 2), num_heads=(3, 6), window_size=4
            ),
            diffusion=DiffusionUNetConfig(channels=(8, 8, 16), attention_heads=4, norm_groups=4, input_patch=patch),
            discriminator=DiscriminatorConfig(base_channels=8),
        ),
        pretrain=pre,
        finetune=FinetuneConfig(epochs=12, lr_step_epoch=6, patch_size=patch),
    )


def profile_config(name: str) -> ExperimentConfig:
    if name == "paper":
        return paper_profile()
    if name == "desk":
        return desk_profile()
    raise ConfigError(f"profile: unknown profile {name!r}")


def config_from_dict(values: dict[str, Any] | None) -> ExperimentConfig:
    """Overlay ``values`` on the profile they name (default ``paper``)."""
    values = dict(values or {})
    profile = values.get("profile", "paper")
    if not isinstance(profile, str):
        raise ConfigError(f"profile: expected a string, got {profile!r}")
    cfg = build_dataclass(ExperimentConfig, values, base=profile_config(profile))
    return cfg


def parse_config(path: str | Path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        values = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from None
    if values is not None and not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = config_from_dict(values)
    cfg.validate(check_paths=check_paths)
    return cfg


def emit_config(cfg: ExperimentConfig, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
