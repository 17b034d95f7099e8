"""Run configuration: TOML loading, validation, presets, snapshots."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError

ENV_PREFIX = "STAGEMIX_"

LAYOUTS = ("market", "duke", "cuhk03", "synthetic")
BACKBONES = ("toy", "resnet50")
MIX_KINDS = ("a_hard_mix", "cutout", "cutmix_feature", "a_cutmix_feature", "none")
SOURCE_POLICIES = ("progressive", "fresh")

BACKBONE_STRIDE = 16


@dataclass
class DatasetConfig:
    layout: str = "synthetic"
    root: str = ""
    height: int = 96
    width: int = 32


@dataclass
class SamplerConfig:
    p: int = 8
    q: int = 4


@dataclass
class ModelConfig:
    backbone: str = "toy"
    embed_dim: int = 128
    stages: int = 3
    normalize_embeddings: bool = False
    pretrained_weights: str = ""


@dataclass
class MixConfig:
    kind: str = "a_hard_mix"
    k: int = 1
    block_h: int = 2
    block_w: int = 1
    source_policy: str = "progressive"


@dataclass
class LossConfig:
    epsilon: float = 0.1
    margin: float = 1.2
    stage_weights: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    concat_triplet: bool = False


@dataclass
class OptimConfig:
    lr: float = 1e-3
    epochs: int = 30
    warmup_epochs: int = 0
    decay_epochs: list[int] = field(default_factory=list)
    decay_factor: float = 0.1
    eval_every: int = 10


@dataclass
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 7
    output_dir: str = "runs/out"

    @property
    def batch_size(self) -> int:
        return self.sampler.p * self.sampler.q

    @property
    def feature_hw(self) -> tuple[int, int]:
        return (self.dataset.height // BACKBONE_STRIDE,
                self.dataset.width // BACKBONE_STRIDE)

    def validate(self) -> None:
        ds, mx = self.dataset, self.mix
        if ds.layout not in LAYOUTS:
            raise ConfigError(f"dataset.layout: {ds.layout!r} not one of {LAYOUTS}")
        if ds.height <= 0 or ds.width <= 0:
            raise ConfigError("dataset.height/width: must be positive")
        if ds.height % BACKBONE_STRIDE or ds.width % BACKBONE_STRIDE:
            raise ConfigError(
                f"dataset.height/width: {ds.height}x{ds.width} must be divisible "
                f"by the backbone stride {BACKBONE_STRIDE}")
        if self.sampler.p < 2:
            raise ConfigError("sampler.p: need at least 2 identities per batch")
        if self.sampler.q < 2:
            raise ConfigError("sampler.q: need at least 2 instances per identity")
        if self.model.backbone not in BACKBONES:
            raise ConfigError(f"model.backbone: {self.model.backbone!r} not one of {BACKBONES}")
        if self.model.embed_dim <= 0:
            raise ConfigError("model.embed_dim: must be positive")
        if self.model.stages < 1:
            raise ConfigError("model.stages: must be >= 1")
        if mx.kind not in MIX_KINDS:
            raise ConfigError(f"mix.kind: {mx.kind!r} not one of {MIX_KINDS}")
        if mx.source_policy not in SOURCE_POLICIES:
            raise ConfigError(
                f"mix.source_policy: {mx.source_policy!r} not one of {SOURCE_POLICIES}")
        fh, fw = self.feature_hw
        if mx.block_h <= 0 or fh % mx.block_h:
            raise ConfigError(
                f"mix.block_h: feature height {fh} is not divisible by block_h {mx.block_h}")
        if mx.block_w <= 0 or fw % mx.block_w:
            raise ConfigError(
                f"mix.block_w: feature width {fw} is not divisible by block_w {mx.block_w}")
        num_blocks = (fh // mx.block_h) * (fw // mx.block_w)
        if not 0 <= mx.k <= num_blocks:
            raise ConfigError(f"mix.k: {mx.k} outside [0, {num_blocks}] for the block grid")
        if not 0.0 <= self.loss.epsilon < 1.0:
            raise ConfigError("loss.epsilon: must be in [0, 1)")
        if self.loss.margin <= 0:
            raise ConfigError("loss.margin: must be positive")
        if len(self.loss.stage_weights) != self.model.stages:
            raise ConfigError(
                f"loss.stage_weights: expected {self.model.stages} weights, "
                f"got {len(self.loss.stage_weights)}")
        if any(w < 0 for w in self.loss.stage_weights):
            raise ConfigError("loss.stage_weights: must be non-negative")
        if self.optim.lr <= 0:
            raise ConfigError("optim.lr: must be positive")
        if self.optim.epochs < 1:
            raise ConfigError("optim.epochs: must be >= 1")
        if self.optim.eval_every < 1:
            raise ConfigError("optim.eval_every: must be >= 1")


_SECTIONS = ("dataset", "sampler", "model", "mix", "loss", "optim")
_TOP_LEVEL = ("seed", "output_dir")


def _coerce(value, target, keypath: str):
    """Coerce a raw TOML/env value to the type of the dataclass default."""
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{keypath}: expected a boolean, got {value!r}")
    if isinstance(target, int) and not isinstance(target, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{keypath}: expected an integer, got {value!r}") from None
    if isinstance(target, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{keypath}: expected a number, got {value!r}") from None
    if isinstance(target, list):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{keypath}: expected a list, got {value!r}")
        elem = target[0] if target else 1.0
        return [_coerce(v, elem, keypath) for v in value]
    if isinstance(target, str):
        return str(value)
    return value


def config_from_dict(data: dict) -> Config:
    cfg = Config()
    for key in data:
        if key not in _SECTIONS and key not in _TOP_LEVEL:
            raise ConfigError(f"{key}: unknown config key")
    for name in _SECTIONS:
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{name}: expected a table")
        target = getattr(cfg, name)
        known = {f.name for f in dataclasses.fields(target)}
        for key, value in section.items():
            if key not in known:
                raise ConfigError(f"{name}.{key}: unknown config key")
            setattr(target, key, _coerce(value, getattr(target, key), f"{name}.{key}"))
    if "seed" in data:
        cfg.seed = _coerce(data["seed"], cfg.seed, "seed")
    if "output_dir" in data:
        cfg.output_dir = _coerce(data["output_dir"], cfg.output_dir, "output_dir")
    return cfg


def config_to_dict(cfg: Config) -> dict:
    out: dict = {"seed": cfg.seed, "output_dir": cfg.output_dir}
    for name in _SECTIONS:
        out[name] = dataclasses.asdict(getattr(cfg, name))
    return out


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def config_to_toml(cfg: Config) -> str:
    """Deterministic snapshot; parsing it back reproduces the config exactly."""
    lines = [f"seed = {cfg.seed}", f"output_dir = {_toml_value(cfg.output_dir)}"]
    for name in _SECTIONS:
        lines.append("")
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            lines.append(f"{f.name} = {_toml_value(getattr(getattr(cfg, name), f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def preset_path(name: str) -> Path:
    return Path(__file__).parent / "presets" / f"{name}.toml"


def load_preset(name: str) -> Config:
    path = preset_path(name)
    if not path.is_file():
        available = sorted(p.stem for p in path.parent.glob("*.toml"))
        raise ConfigError(f"unknown preset {name!r}; available: {available}")
    return load_config(path)


def apply_env_overrides(cfg: Config, environ=None) -> list[str]:
    """Apply STAGEMIX_<SECTION>_<KEY> overrides; returns the keys that changed."""
    environ = os.environ if environ is None else environ
    applied = []
    for name in _SECTIONS:
        target = getattr(cfg, name)
        for f in dataclasses.fields(target):
            env_key = f"{ENV_PREFIX}{name.upper()}_{f.name.upper()}"
            if env_key in environ:
                setattr(target, f.name,
                        _coerce(environ[env_key], getattr(target, f.name), f"{name}.{f.name}"))
                applied.append(f"{name}.{f.name}")
    for key in _TOP_LEVEL:
        env_key = f"{ENV_PREFIX}{key.upper()}"
        if env_key in environ:
            setattr(cfg, key, _coerce(environ[env_key], getattr(cfg, key), key))
            applied.append(key)
    return applied


def apply_key_overrides(cfg: Config, overrides: list[str]) -> None:
    """Apply `section.key=value` strings (CLI --set)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        keypath, raw = item.split("=", 1)
        keypath = keypath.strip()
        if keypath in _TOP_LEVEL:
            setattr(cfg, keypath, _coerce(raw.strip(), getattr(cfg, keypath), keypath))
            continue
        if "." not in keypath:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        section, key = keypath.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"{keypath}: unknown config section")
        target = getattr(cfg, section)
        if key not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"{keypath}: unknown config key")
        setattr(target, key, _coerce(raw.strip(), getattr(target, key), keypath))
