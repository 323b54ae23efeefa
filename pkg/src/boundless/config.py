"""Declarative run configuration.

A run is described by one YAML file with nested sections. Every key has a
default reproducing the reference training setup; ``desk_preset`` gives the
small CPU-scale variant. Command-line overrides use dotted keys, e.g.
``training.batch_size=64`` or ``no_cond=true``. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import yaml

from .discriminator import DiscriminatorConfig
from .errors import ConfigError
from .generator import GeneratorConfig
from .losses import LossWeights
from .masking import MaskSpec
from .panorama import PanoramaConfig
from .trainer import ModelSpec, TrainingConfig


@dataclasses.dataclass
class DataSection:
    root: Optional[str] = None
    synthetic: bool = False
    synthetic_per_class: int = 12
    classes: Optional[list] = None
    top_k: Optional[int] = 50
    holdout_per_class: int = 10
    seed: int = 0
    image_size: int = 257
    on_error: str = "raise"


@dataclasses.dataclass
class GeneratorSection:
    width_multiplier: float = 1.0
    use_skips: bool = True
    use_instance_norm: bool = True
    elu_alpha: float = 1.0
    norm_after_gating: bool = True


@dataclasses.dataclass
class DiscriminatorSection:
    width_multiplier: float = 1.0
    leaky_slope: float = 0.2
    use_conditioning: bool = True


@dataclasses.dataclass
class ModelSection:
    generator: GeneratorSection = dataclasses.field(default_factory=GeneratorSection)
    discriminator: DiscriminatorSection = dataclasses.field(default_factory=DiscriminatorSection)


@dataclasses.dataclass
class EmbeddingSection:
    provider: str = "inception"
    embed_dim: int = 1000
    seed: int = 0
    weights_path: Optional[str] = None


@dataclasses.dataclass
class LossSection:
    lambda_adv: float = 1e-2
    stabilizer: str = "projection_conditioning"
    stabilizer_weight: float = 1.0
    feature_matching_weight: Optional[float] = None
    perceptual_weight: Optional[float] = None


@dataclasses.dataclass
class MaskSection:
    geometry: str = "right_strip"
    fraction: float = 0.25
    jitter_px: int = 4


@dataclasses.dataclass
class TrainingSection:
    g_lr: float = 1e-4
    d_lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9
    batch_size: int = 256
    steps: int = 100_000
    checkpoint_every: int = 1000
    seed: int = 0
    dtype: str = "float32"
    mask: MaskSection = dataclasses.field(default_factory=MaskSection)


@dataclasses.dataclass
class EvaluationSection:
    geometry: str = "right_strip"
    fraction: float = 0.25
    batch_size: int = 16


@dataclasses.dataclass
class PanoramaSection:
    seed_width: int = 192
    pad_width: int = 65
    window_height: int = 257
    steps: int = 6
    max_width: int = 16384


@dataclasses.dataclass
class RunConfig:
    no_cond: bool = False
    no_skip: bool = False
    no_instance_norm: bool = False
    data: DataSection = dataclasses.field(default_factory=DataSection)
    model: ModelSection = dataclasses.field(default_factory=ModelSection)
    embedding: EmbeddingSection = dataclasses.field(default_factory=EmbeddingSection)
    losses: LossSection = dataclasses.field(default_factory=LossSection)
    training: TrainingSection = dataclasses.field(default_factory=TrainingSection)
    evaluation: EvaluationSection = dataclasses.field(default_factory=EvaluationSection)
    panorama: PanoramaSection = dataclasses.field(default_factory=PanoramaSection)

    # ---------------------------------------------------------------- (de)serialization

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "RunConfig":
        return _build(cls, data or {}, "")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a mapping at the top level")
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")

    def with_overrides(self, overrides) -> "RunConfig":
        data = self.to_dict()
        for item in overrides or ():
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            node = data
            parts = key.strip().split(".")
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = yaml.safe_load(raw) if raw.strip() else None
        return RunConfig.from_dict(data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:10]

    # ---------------------------------------------------------------- module configs

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.data.image_size, self.data.image_size)

    def mask_spec(self) -> MaskSpec:
        m = self.training.mask
        return MaskSpec(m.geometry, m.fraction, m.jitter_px)

    def eval_mask_spec(self) -> MaskSpec:
        return MaskSpec(self.evaluation.geometry, self.evaluation.fraction, 0)

    def model_spec(self) -> ModelSpec:
        g, d, t = self.model.generator, self.model.discriminator, self.training
        try:
            return ModelSpec(
                GeneratorConfig(width_multiplier=g.width_multiplier, use_skips=g.use_skips,
                                use_instance_norm=g.use_instance_norm, elu_alpha=g.elu_alpha,
                                norm_after_gating=g.norm_after_gating),
                DiscriminatorConfig(input_size=self.image_size, width_multiplier=d.width_multiplier,
                                    embed_dim=self.embedding.embed_dim, use_conditioning=d.use_conditioning,
                                    leaky_slope=d.leaky_slope),
                LossWeights(**dataclasses.asdict(self.losses)),
                TrainingConfig(g_lr=t.g_lr, d_lr=t.d_lr, beta1=t.beta1, beta2=t.beta2,
                               batch_size=t.batch_size, steps=t.steps, mask_spec=self.mask_spec(),
                               no_cond=self.no_cond, no_skip=self.no_skip,
                               no_instance_norm=self.no_instance_norm, seed=t.seed,
                               checkpoint_every=t.checkpoint_every, dtype=t.dtype),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def panorama_config(self) -> PanoramaConfig:
        return PanoramaConfig(**dataclasses.asdict(self.panorama))


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix.rstrip('.') or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        if default is not None and dataclasses.is_dataclass(default):
            kwargs[name] = _build(default, value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, fields[name].type, prefix + name)
    return cls(**kwargs)


_SCALARS = {"bool": bool, "int": int, "float": float, "str": str}


def _coerce(value: Any, annotation: str, key: str):
    """Coerce a parsed value to the field's scalar type.

    YAML 1.1 reads ``1e-4`` as a string, so numeric strings are accepted for
    float fields. Lists and unannotated types pass through.
    """
    optional = annotation.startswith("Optional[")
    name = annotation[len("Optional["):-1] if optional else annotation
    target = _SCALARS.get(name)
    if target is None or (value is None and optional):
        return value
    if target is float and isinstance(value, (int, str)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError:
            pass
    elif isinstance(value, target) and not (target is int and isinstance(value, bool)):
        return value
    raise ConfigError(f"{key} must be {name}, got {value!r}")


def flatten(config: RunConfig) -> list[tuple[str, Any]]:
    """Dotted ``(key, value)`` pairs of every leaf setting."""
    out = []

    def walk(node, prefix):
        for key, value in node.items():
            if isinstance(value, dict):
                walk(value, f"{prefix}{key}.")
            else:
                out.append((prefix + key, value))

    walk(config.to_dict(), "")
    return out


def desk_preset() -> RunConfig:
    """CPU-scale settings: synthetic 65x65 textures, quarter-width nets, stub embeddings."""
    return RunConfig().with_overrides([
        "data.synthetic=true",
        "data.synthetic_per_class=22",
        "data.top_k=null",
        "data.holdout_per_class=1",
        "data.image_size=65",
        "model.generator.width_multiplier=0.25",
        "model.discriminator.width_multiplier=0.25",
        "embedding.provider=stub",
        "training.batch_size=8",
        "training.steps=2000",
        "training.checkpoint_every=500",
        "panorama.seed_width=49",
        "panorama.pad_width=16",
        "panorama.window_height=65",
    ])


PRESETS = {"full": RunConfig, "desk": desk_preset}
