"""Configuration dataclasses, paper/toy presets and strict file loading.

Layer descriptors are ``(kernel, filters, stride)`` triples. Config files are
JSON or YAML documents that mirror :class:`ExperimentConfig`; unknown keys
are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pydantic
import yaml

from .errors import ConfigError

_STRICT = pydantic.ConfigDict(extra="forbid")

Layer = tuple[int, int, int]

PAPER_LR = 1e-4
PAPER_LAMBDA_S = 50.0
PAPER_R_CLIP = 20.0
PAPER_NOISE_HALF_WIDTH = 0.5
PAPER_LAMBDA1_RANGE = (1e-8, 1e-4)
PAPER_LAMBDA2_RANGE = (1e-7, 7e-2)
PAPER_RATE_WEIGHT_RANGE = (1e-4, 1e-1)


@dataclass
class ExtractorConfig:
    __pydantic_config__ = _STRICT

    input_size: int = 160
    channels: int = 3
    backbone: list[Layer] = field(
        default_factory=lambda: [(3, 32, 2), (3, 64, 2), (3, 128, 2), (3, 256, 2)]
    )
    embed_dim: int = 128
    transform_size: int = 32
    transform_seed_channels: int = 256
    transform_head: list[Layer] = field(
        default_factory=lambda: [(4, 128, 2), (4, 64, 2), (4, 3, 2)]
    )
    lambda_s: float = PAPER_LAMBDA_S
    num_classes: int = 10
    learning_rate: float = PAPER_LR
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def validate(self):
        if self.lambda_s < 0:
            raise ConfigError("lambda_s must be >= 0")
        if not self.transform_head or self.transform_head[-1][1] != self.channels:
            raise ConfigError("transform head must end in a projection to image channels")
        strides = int(np.prod([s for _, _, s in self.transform_head]))
        if self.transform_size % strides:
            raise ConfigError("transform_size must be divisible by the head's total stride")
        if self.num_classes < 2:
            raise ConfigError("need at least two identities")


@dataclass
class FeatureCodecConfig:
    __pydantic_config__ = _STRICT

    feature_dim: int = 128
    # Output widths of the encoder FC cascade; the last is the latent size M.
    layer_widths: list[int] = field(default_factory=lambda: [128, 128, 128])
    use_gdn: bool = True
    r_clip: float = PAPER_R_CLIP
    noise_half_width: float = PAPER_NOISE_HALF_WIDTH
    lambda_1: float = 1e-6
    lambda_2: float = 1e-4
    l1_on_noisy: bool = True
    finetune_transform: bool = True
    shared_symbol_model: bool = False
    learning_rate: float = PAPER_LR
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    @property
    def latent_dim(self):
        return self.layer_widths[-1]

    def validate(self):
        if self.r_clip <= 0:
            raise ConfigError("r_clip must be > 0")
        if self.lambda_1 < 0 or self.lambda_2 < 0:
            raise ConfigError("lambda_1 and lambda_2 must be >= 0")
        if not self.layer_widths:
            raise ConfigError("layer_widths must be nonempty")


@dataclass
class GeneratorConfig:
    __pydantic_config__ = _STRICT

    num_levels: int = 3
    transform_size: int = 32
    hidden_channels: int = 32
    # One descriptor list per level; each ends in a 3-filter k3/s1 projection.
    stage_specs: list[list[Layer]] = field(
        default_factory=lambda: [[(3, 32, 1), (3, 32, 1), (3, 3, 1)] for _ in range(3)]
    )
    lr_initial: float = 1e-4
    lr_floor: float = 1e-5
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0

    @property
    def output_size(self):
        return self.transform_size * 2**self.num_levels

    def level_sizes(self):
        return [self.transform_size * 2**l for l in range(1, self.num_levels + 1)]

    def validate(self):
        if len(self.stage_specs) != self.num_levels:
            raise ConfigError("need one stage spec per pyramid level")
        for spec in self.stage_specs:
            if not spec or tuple(spec[-1]) != (3, 3, 1):
                raise ConfigError("each stage must end in a (3, 3, 1) projection")
            if any(s != 1 for _, _, s in spec):
                raise ConfigError("stage layers must keep resolution (stride 1)")


@dataclass
class EnhancementConfig:
    __pydantic_config__ = _STRICT

    analysis: list[Layer] = field(default_factory=lambda: [(5, 128, 2), (5, 128, 2), (5, 192, 2)])
    hyper_analysis: list[Layer] = field(default_factory=lambda: [(3, 128, 1), (5, 128, 2)])
    rate_weight: float = 1e-2
    likelihood_bound: float = 1e-9
    scale_bound: float = 0.11
    num_scales: int = 64
    scale_max: float = 256.0
    # Alphabet half-width of the coding tables; values beyond use escapes.
    tail: int = 32
    learning_rate: float = PAPER_LR
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0

    @property
    def num_latent_channels(self):
        return self.analysis[-1][1]

    @property
    def num_hyper_channels(self):
        return self.hyper_analysis[-1][1]

    def validate(self):
        if self.rate_weight <= 0:
            raise ConfigError("rate_weight must be > 0")
        if any(s != 2 for _, _, s in self.analysis):
            raise ConfigError("analysis layers are stride 2 so synthesis can mirror them")


@dataclass
class ExperimentConfig:
    __pydantic_config__ = _STRICT

    dataset_root: str = "data"
    output_dir: str = "runs/default"
    seed: int = 0
    image_size: int = 256
    split_ratios: tuple[float, float, float] = (8.0, 1.0, 1.0)
    num_pairs: int = 600
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    feature_codec: FeatureCodecConfig = field(default_factory=FeatureCodecConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    enhancement: EnhancementConfig = field(default_factory=EnhancementConfig)
    lambda1_sweep: list[float] = field(default_factory=lambda: [1e-4, 1e-5, 1e-6, 1e-7, 1e-8])
    lambda2_sweep: list[float] = field(
        default_factory=lambda: [float(v) for v in np.geomspace(7e-2, 1e-7, 5)]
    )
    rate_weight_sweep: list[float] = field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4])
    saturation_epsilon: float = 0.001

    def validate(self):
        for sub in (self.extractor, self.feature_codec, self.generator, self.enhancement):
            sub.validate()
        if self.extractor.transform_size != self.generator.transform_size:
            raise ConfigError("extractor and generator disagree on transform size")
        if self.generator.output_size != self.image_size:
            raise ConfigError(
                f"image_size {self.image_size} != transform_size * 2**num_levels "
                f"= {self.generator.output_size}"
            )
        if self.feature_codec.feature_dim != self.extractor.embed_dim:
            raise ConfigError("feature codec dimension must equal embed_dim")
        if not self.lambda1_sweep or not self.rate_weight_sweep:
            raise ConfigError("sweeps must be nonempty")
        if len(self.lambda2_sweep) not in (1, len(self.lambda1_sweep)):
            raise ConfigError("lambda2_sweep must have one entry or match lambda1_sweep")
        return self

    def lambda_pairs(self):
        l2 = self.lambda2_sweep * len(self.lambda1_sweep) if len(self.lambda2_sweep) == 1 else self.lambda2_sweep
        return list(zip(self.lambda1_sweep, l2))


def paper_config(**overrides):
    """Full-scale geometry: 256px output, 160px extractor input, 32px transform, D=128."""
    return ExperimentConfig(**overrides).validate()


def toy_config(**overrides):
    """Desk-scale geometry: 64px images, 16px transform, two pyramid levels, D=16."""
    cfg = ExperimentConfig(
        image_size=64,
        split_ratios=(10.0, 2.0, 4.0),
        num_pairs=3000,
        extractor=ExtractorConfig(
            input_size=64,
            backbone=[(3, 16, 2), (3, 32, 2), (3, 64, 2), (3, 64, 2)],
            embed_dim=16,
            transform_size=16,
            transform_seed_channels=64,
            transform_head=[(4, 32, 2), (4, 3, 2)],
            learning_rate=1e-3,
            epochs=60,
        ),
        feature_codec=FeatureCodecConfig(
            feature_dim=16, layer_widths=[64, 64, 16], learning_rate=3e-3, epochs=300
        ),
        generator=GeneratorConfig(
            num_levels=2,
            transform_size=16,
            hidden_channels=16,
            stage_specs=[[(3, 16, 1), (3, 16, 1), (3, 3, 1)] for _ in range(2)],
            lr_initial=1e-3,
            lr_floor=1e-4,
            epochs=20,
        ),
        enhancement=EnhancementConfig(
            analysis=[(5, 32, 2), (5, 32, 2), (5, 32, 2)],
            hyper_analysis=[(3, 32, 1), (5, 32, 2)],
            learning_rate=1e-3,
            epochs=15,
        ),
        lambda1_sweep=[1.0, 1e-1, 1e-3, 1e-5],
        lambda2_sweep=[1e-3],
        rate_weight_sweep=[1e-1, 1e-2, 1e-3, 1e-4],
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


_ADAPTER = pydantic.TypeAdapter(ExperimentConfig)


def config_from_dict(data):
    try:
        cfg = _ADAPTER.validate_python(data)
    except pydantic.ValidationError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def config_to_dict(cfg):
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def config_schema():
    return _ADAPTER.json_schema()


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    return config_from_dict(data)


def save_config(cfg, path):
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2))


def sub_config_from_dict(cls, data):
    """Rebuild one module config (as stored in a checkpoint)."""
    try:
        return pydantic.TypeAdapter(cls).validate_python(data)
    except pydantic.ValidationError as exc:
        raise ConfigError(str(exc)) from None
