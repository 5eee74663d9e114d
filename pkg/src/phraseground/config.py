"""Run configuration: nested dataclasses, strict dict round-tripping, a
stable fingerprint for checkpoint compatibility checks, and YAML/JSON file
loading. Defaults are the desk-scale training setup; `micro_config()` is the
tiny layout the gradient-check harness drives the full model with.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class AdapterConfig:
    position: str = "both"          # none | encoder | decoder | both
    bottleneck: int = 64
    use_attention_mask: bool = True

    def validate(self):
        if self.position not in ("none", "encoder", "decoder", "both"):
            raise ConfigError(f"adapter.position {self.position!r} invalid")


@dataclass
class MlmaConfig:
    enabled: bool = True
    bi_attention: bool = True
    text_self_attention: bool = True
    deformable_points: int = 4
    deformable_heads: int = 4


@dataclass
class DecoderConfig:
    layers: int = 3
    masked_attention: bool = True


@dataclass
class ModelConfig:
    image_size: int = 128
    latent_stride: int = 8
    channels: list = field(default_factory=lambda: [32, 64, 96])
    encoder_levels: list = field(default_factory=lambda: [0, 0, 1, 1])
    middle_levels: list = field(default_factory=lambda: [2, 2])
    decoder_levels: list = field(default_factory=lambda: [1, 1, 0, 0])
    heads: int = 4
    c_t: int = 64
    c_m: int = 64
    f2_channels: int = 32
    ffn_ratio: int = 2
    time_steps: int = 2
    time_step: int = 0
    norm_groups: int = 8
    n_max: int = 30
    max_words: int = 230
    seed: int = 0
    dtype: str = "float32"
    freeze_backbone: bool = False
    freeze_text_encoder: bool = False
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    mlma: MlmaConfig = field(default_factory=MlmaConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    @property
    def n_blocks(self) -> int:
        return len(self.encoder_levels) + len(self.middle_levels) + len(self.decoder_levels)

    def validate(self):
        self.adapter.validate()
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype {self.dtype!r} must be float32 or float64")
        if self.time_step not in range(self.time_steps):
            raise ConfigError("time_step outside embedding table")
        for lv in self.encoder_levels + self.middle_levels + self.decoder_levels:
            if lv not in range(len(self.channels)):
                raise ConfigError(f"block level {lv} has no channel entry")


@dataclass
class SceneConfig:
    num_things: int = 3
    num_stuff: int = 2
    plural_probability: float = 0.3
    distractor_phrase_probability: float = 0.62


@dataclass
class DataConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train_size: int = 200
    eval_size: int = 50
    seed: int = 1000


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    log_every: int = 25
    checkpoint_every: int = 500


@dataclass
class EvalConfig:
    head: str = "decoder"           # decoder | adapter | diffusion | gt

    def validate(self):
        if self.head not in ("decoder", "adapter", "diffusion", "gt"):
            raise ConfigError(f"eval.head {self.head!r} invalid")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.model.validate()
        self.eval.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls(
            model=_build(ModelConfig, raw.get("model", {}), "model"),
            data=_build(DataConfig, raw.get("data", {}), "data"),
            optim=_build(OptimConfig, raw.get("optim", {}), "optim"),
            eval=_build(EvalConfig, raw.get("eval", {}), "eval"),
        )
        unknown = set(raw) - {"model", "data", "optim", "eval"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg.validate()
        return cfg

    def fingerprint(self) -> str:
        blob = json.dumps(self.model.__dict__, default=lambda o: o.__dict__, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_NESTED = {"adapter": AdapterConfig, "mlma": MlmaConfig, "decoder": DecoderConfig,
           "scene": SceneConfig}


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _build(_NESTED[key], value, f"{path}.{key}")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """CLI `--set section.key=value` overrides, YAML-parsed values."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like a.b=value")
        dotted, value = item.split("=", 1)
        node = raw
        keys = dotted.split(".")
        for key in keys[:-1]:
            if key not in node:
                raise ConfigError(f"override path {dotted!r} not found")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"override path {dotted!r} not found")
        node[keys[-1]] = yaml.safe_load(value)
    return RunConfig.from_dict(raw)


def micro_config() -> RunConfig:
    """Full-model layout small enough for exhaustive finite differences:
    16x16 input, half-resolution latent (so no pyramid level degenerates to a
    single pixel), 8 channels everywhere, 4 blocks, 1 decoder layer,
    2 phrases."""
    cfg = RunConfig()
    m = cfg.model
    m.image_size = 16
    m.latent_stride = 2
    m.channels = [8, 8, 8]
    m.encoder_levels = [0]
    m.middle_levels = [1, 2]
    m.decoder_levels = [0]
    m.heads = 2
    m.c_t = 8
    m.c_m = 8
    m.f2_channels = 8
    m.adapter.bottleneck = 8
    m.mlma.deformable_points = 2
    m.mlma.deformable_heads = 2
    m.decoder.layers = 1
    # finite differences cannot cross the thresholded attention-mask steps;
    # the masked path has its own exactness tests
    m.adapter.use_attention_mask = False
    m.decoder.masked_attention = False
    m.norm_groups = 4
    m.dtype = "float64"
    # a well-conditioned evaluation point for finite differences
    m.seed = 1
    cfg.data.scene = SceneConfig(num_things=1, num_stuff=1, plural_probability=0.0,
                                 distractor_phrase_probability=0.0)
    cfg.validate()
    return cfg
