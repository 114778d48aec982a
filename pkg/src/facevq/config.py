"""Run configuration: one structured-text file drives a whole run.

Every tunable from the other modules lives here with a documented default.
Parsing is strict: unknown keys are rejected with their dotted path so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .backbone import BackboneConfig, StageSpec, toy_backbone_config
from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass(frozen=True)
class CodebookSizes:
    spatial: int = 1024
    temporal: int = 1024


@dataclass(frozen=True)
class QuantizeConfig:
    window: int = 1               # motion-residual time window
    regularizer: str = "mpr"      # mpr | pdr | none

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.regularizer not in ("mpr", "pdr", "none"):
            raise ConfigError(f"regularizer must be mpr, pdr or none, got {self.regularizer!r}")


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.25
    lambda_adv: float = 0.1
    lambda_ce: float = 1.0
    lambda_kl: float = 1.0
    adv_enabled: bool = True
    kl_enabled: bool = True
    perceptual_enabled: bool = True

    def __post_init__(self) -> None:
        for name in ("beta", "lambda_adv", "lambda_ce", "lambda_kl"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Stage1Config:
    iterations: int = 250_000
    batch_size: int = 4
    clip_frames: int = 24
    resolution: int = 256
    lr_generator: float = 1e-4
    lr_discriminator: float = 4e-4
    adv_warmup: int = 500
    checkpoint_every: int = 5000
    log_every: int = 1


@dataclass(frozen=True)
class Stage2Config:
    iterations: int = 50_000
    batch_size: int = 4
    clip_frames: int = 24
    resolution: int = 512
    lr: float = 1e-4
    noise_free_fraction: float = 0.4
    stage1_checkpoint: str | None = None
    degradation: str = "full"     # full | identity
    transformer_layers: int = 6
    transformer_heads: int = 8
    checkpoint_every: int = 5000
    log_every: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise_free_fraction <= 1.0:
            raise ConfigError("noise_free_fraction must be in [0, 1]")
        if self.degradation not in ("full", "identity"):
            raise ConfigError(f"degradation must be full or identity, got {self.degradation!r}")


@dataclass(frozen=True)
class DegradeConfig:
    sigma: tuple[float, float] = (2.0, 5.0)
    scale: tuple[float, float] = (2.0, 4.0)
    noise: tuple[float, float] = (0.0, 5.0)
    crf: tuple[int, int] = (18, 32)
    codec: str = "auto"           # auto | proxy | external

    def __post_init__(self) -> None:
        if self.codec not in ("auto", "proxy", "external"):
            raise ConfigError(f"codec must be auto, proxy or external, got {self.codec!r}")


@dataclass(frozen=True)
class CurateConfig:
    side_fraction_limit: float = 0.5
    min_motion: float = 0.0
    ocr_confidence: float = 0.5
    crop_margin: float = 0.2


@dataclass(frozen=True)
class ClientsConfig:
    """Local paths to optional pretrained clients; absent paths activate
    the built-in fallbacks (frozen random pyramids, stub OCR)."""

    critic_extractor: str | None = None
    perceptual_extractor: str | None = None
    face_embedder: str | None = None


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    dataset_root: str = "data"
    output_root: str = "runs"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    codebooks: CodebookSizes = field(default_factory=CodebookSizes)
    quantize: QuantizeConfig = field(default_factory=QuantizeConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    curate: CurateConfig = field(default_factory=CurateConfig)
    clients: ClientsConfig = field(default_factory=ClientsConfig)

    def __post_init__(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} unsupported (want {CONFIG_VERSION})")


_TUPLE_FIELDS = {"sigma", "scale", "noise", "crf", "stages"}


def _build(cls: type, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(where + u for u in unknown))}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        ftype = known[name].type
        if name == "backbone":
            kwargs[name] = _build_backbone(value, sub)
        elif isinstance(value, dict):
            target = _DATACLASS_FIELD_TYPES.get((cls, name))
            if target is None:
                raise ConfigError(f"{sub}: unexpected mapping")
            kwargs[name] = _build(target, value, sub)
        elif isinstance(value, list) and name in _TUPLE_FIELDS:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _build_backbone(data: Any, path: str) -> BackboneConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    allowed = {f.name for f in fields(BackboneConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(f'{path}.{u}' for u in unknown))}")
    payload = dict(data)
    if "stages" in payload:
        stage_fields = {f.name for f in fields(StageSpec)}
        stages = []
        for i, s in enumerate(payload["stages"]):
            bad = set(s) - stage_fields
            if bad:
                raise ConfigError(
                    f"unknown config key(s): "
                    f"{', '.join(sorted(f'{path}.stages[{i}].{b}' for b in bad))}"
                )
            stages.append(StageSpec(**s))
        payload["stages"] = tuple(stages)
    return BackboneConfig(**payload)


_DATACLASS_FIELD_TYPES = {
    (RunConfig, "codebooks"): CodebookSizes,
    (RunConfig, "quantize"): QuantizeConfig,
    (RunConfig, "losses"): LossWeights,
    (RunConfig, "stage1"): Stage1Config,
    (RunConfig, "stage2"): Stage2Config,
    (RunConfig, "degrade"): DegradeConfig,
    (RunConfig, "curate"): CurateConfig,
    (RunConfig, "clients"): ClientsConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def config_to_dict(cfg: RunConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj

    return convert(cfg)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def toy_run_config(seed: int = 0, **overrides) -> RunConfig:
    """Desk-scale defaults: 64x64 8-frame clips, 64-item codebooks."""
    base = dict(
        seed=seed,
        backbone=toy_backbone_config(),
        codebooks=CodebookSizes(spatial=64, temporal=64),
        stage1=Stage1Config(
            iterations=2000,
            batch_size=2,
            clip_frames=8,
            resolution=64,
            adv_warmup=500,
            checkpoint_every=1000,
        ),
        stage2=Stage2Config(
            iterations=1000,
            batch_size=2,
            clip_frames=8,
            resolution=64,
            transformer_layers=2,
            transformer_heads=4,
            checkpoint_every=500,
        ),
    )
    base.update(overrides)
    return RunConfig(**base)
