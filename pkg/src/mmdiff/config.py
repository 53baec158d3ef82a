"""Run configuration: one dataclass tree covering model, schedule, data, training
and sampling, with YAML loading, dotted-key overrides and a stable hash.

The ``desk`` defaults below are sized for a single CPU/small-GPU box. The values
used by the original full-scale setup (token width 768, MLP hidden 512, 30
boxes, 8x17 keypoints, 200K iterations split 150K/50K) are kept in
``paper_scale()`` as a documented preset; they are not meant to run here.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

CONFIG_VERSION = 1

MODALITIES = ("sketch", "depth", "box", "keypoint", "palette", "style")
IMAGE_FORM = ("sketch", "depth")
SPATIAL = ("box", "keypoint")
NON_SPATIAL = ("palette", "style")


class ConfigurationError(ValueError):
    """Raised when a configuration value is out of its documented range."""


# re-exported here because nearly every module that touches config needs it
__all__ = [
    "RunConfig", "ModelConfig", "ScheduleConfig", "DataConfig", "TrainConfig",
    "SampleConfig", "ConfigurationError", "MODALITIES", "IMAGE_FORM", "SPATIAL",
    "NON_SPATIAL", "load_config", "save_config", "config_hash",
    "config_to_dict", "config_from_dict", "paper_scale",
]


@dataclass
class ModelConfig:
    image_size: int = 32
    image_channels: int = 3
    widths: tuple[int, ...] = (32, 64, 64)       # channels per resolution level
    attn_levels: tuple[int, ...] = (1, 2)        # levels (0-indexed) with SA+CA blocks
    token_width: int = 64                        # width d of all condition tokens
    num_heads: int = 4
    text_len: int = 16                           # textual token count L
    n_freq: int = 8                              # Fourier octaves for coordinates
    num_classes: int = 8
    n_box: int = 8
    n_person: int = 2
    n_joint: int = 5
    palette_bins: tuple[int, int, int] = (11, 5, 5)   # hue, saturation, light
    style_dim: int = 64
    mlp_hidden: int = 128                        # embedder MLP hidden width
    encoder_channels: tuple[int, ...] = (32, 32, 48, 48, 64, 64, 64, 64)
    modalities: tuple[str, ...] = MODALITIES

    @property
    def palette_dim(self) -> int:
        h, s, l = self.palette_bins
        return h * s * l

    @property
    def n_keypoint_tokens(self) -> int:
        return self.n_person * self.n_joint


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class DataConfig:
    min_objects: int = 1
    max_objects: int = 3
    figure_prob: float = 0.5
    color_jitter: float = 0.05        # per-channel RGB jitter around the class color
    min_size: float = 0.10            # object radius as a fraction of image side
    max_size: float = 0.22
    placement_margin: float = 0.02    # extra separation between object extents


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 5e-5
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    stage1_iters: int = 3000          # mirrors the 150K/50K split at a 3:1 ratio
    stage2_iters: int = 1000
    p_drop_image_form: float = 0.5
    p_drop_token: float = 0.1
    p_drop_caption: float = 0.1
    p_sketch_mask: float = 0.7        # probability of applying fg/bg sketch masking
    p_sketch_side: float = 0.5        # foreground vs background, given masking
    backbone_stages: str = "first"    # "first": backbone trains in stage 1 only; "all"
    log_every: int = 25


@dataclass
class SampleConfig:
    steps: int = 50
    w: float = 5.0                    # classifier-free guidance scale
    alpha_im: float = 0.7             # constant image-form strength at inference
    alpha_token_cutoff: float = 0.3   # sp/nsp tokens active for the first 0.3*steps
    kind: str = "ddim"                # "ddim" (deterministic) or "ancestral"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def validate(self) -> "RunConfig":
        m = self.model
        if len(m.widths) < 2:
            raise ConfigurationError("need at least two resolution levels")
        for lvl in m.attn_levels:
            if not 0 <= lvl < len(m.widths):
                raise ConfigurationError(f"attention level {lvl} out of range")
            if m.widths[lvl] != m.token_width:
                raise ConfigurationError(
                    "token_width must equal the channel width at every attention "
                    f"level (level {lvl}: {m.widths[lvl]} != {m.token_width})"
                )
        if m.widths[-1] != m.token_width:
            raise ConfigurationError("token_width must equal the last level width "
                                     "(the middle block attends there)")
        if not set(m.modalities) <= set(MODALITIES):
            raise ConfigurationError(f"unknown modalities in {m.modalities}")
        s = self.schedule
        if s.T < 1:
            raise ConfigurationError("T must be >= 1")
        if not 0.0 < s.beta_start <= s.beta_end < 1.0:
            raise ConfigurationError("need 0 < beta_start <= beta_end < 1")
        d = self.data
        if d.min_objects > d.max_objects:
            raise ConfigurationError("min_objects > max_objects")
        if d.max_objects > m.n_box:
            raise ConfigurationError("max_objects exceeds the box capacity n_box")
        if d.max_objects > m.num_classes:
            raise ConfigurationError("classes are drawn without replacement; "
                                     "max_objects exceeds num_classes")
        for p in (self.train.p_drop_image_form, self.train.p_drop_token,
                  self.train.p_drop_caption, self.train.p_sketch_mask,
                  self.train.p_sketch_side):
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError("probabilities must lie in [0, 1]")
        return self


def paper_scale() -> RunConfig:
    """Full-scale preset mirroring the original hyperparameters (documentation;
    far too large for a desk run)."""
    cfg = RunConfig()
    cfg.model.token_width = 768
    cfg.model.mlp_hidden = 512
    cfg.model.n_box = 30
    cfg.model.n_person = 8
    cfg.model.n_joint = 17
    cfg.train.stage1_iters = 150_000
    cfg.train.stage2_iters = 50_000
    cfg.train.batch_size = 32
    return cfg


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if dataclasses.is_dataclass(f.type) or f.type in (
                ModelConfig, ScheduleConfig, DataConfig, TrainConfig, SampleConfig):
            kwargs[f.name] = _from_plain(f.type, v)
        elif isinstance(v, list):
            kwargs[f.name] = tuple(v)
        else:
            kwargs[f.name] = v
    return cls(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(data: dict) -> RunConfig:
    return _from_plain(RunConfig, data).validate()


def load_config(path: str | Path | None = None,
                overrides: dict[str, object] | None = None) -> RunConfig:
    """Layered configuration: package defaults, then an optional YAML file, then
    dotted-key overrides like ``{"train.lr": 1e-4}``."""
    data = _to_plain(RunConfig())
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        _deep_update(data, loaded)
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ConfigurationError(f"unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config key: {key}")
        node[parts[-1]] = _coerce_like(node[parts[-1]], value)
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _deep_update(base: dict, extra: dict) -> None:
    for key, value in extra.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key: {key}")
        if isinstance(value, dict) and isinstance(base[key], dict):
            _deep_update(base[key], value)
        else:
            base[key] = _coerce_like(base[key], value)


def _coerce_like(old, new):
    if isinstance(old, bool):
        if isinstance(new, str):
            return new.lower() in ("1", "true", "yes")
        return bool(new)
    if isinstance(old, int) and not isinstance(old, bool):
        return int(new)
    if isinstance(old, float):
        return float(new)
    if isinstance(old, list):
        if isinstance(new, str):
            new = [v for v in new.split(",") if v]
        return [_coerce_like(old[0] if old else new[0], v) for v in new]
    return new
