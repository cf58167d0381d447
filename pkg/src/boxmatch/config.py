"""Dataclass configs for the world, the branch simulators, and training."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


@dataclass(frozen=True)
class SceneConfig:
    """World generation: object placement, classes, and the camera ring."""

    n_views: int = 6
    n_classes: int = 4
    appearance_dim: int = 24
    appearance_noise: float = 1.0
    n_objects_min: int = 4
    n_objects_max: int = 10
    # objects are placed in an annulus so every center stays inside the rig's
    # combined field of view
    min_range: float = 4.0
    max_range: float = 40.0
    world_extent: float = 44.0
    speed_max: float = 10.0
    length_range: tuple[float, float] = (3.0, 5.0)
    width_range: tuple[float, float] = (1.4, 2.2)
    height_range: tuple[float, float] = (1.2, 2.4)
    # ring rig
    img_w: int = 320
    img_h: int = 192
    hfov_deg: float = 70.0
    ring_radius: float = 0.25
    cam_height: float = 1.6

    def validate(self) -> None:
        if self.n_views < 1:
            raise ConfigError("n_views must be >= 1")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.n_objects_max < self.n_objects_min or self.n_objects_min < 0:
            raise ConfigError("invalid object count range")
        if not (0 < self.min_range < self.max_range <= self.world_extent):
            raise ConfigError("require 0 < min_range < max_range <= world_extent")
        if self.img_w <= 0 or self.img_h <= 0:
            raise ConfigError("image dims must be positive")


@dataclass(frozen=True)
class SimConfig:
    """Detector-branch simulation: feature dims and noise knobs."""

    feat_dim: int = 64
    fmap_h: int = 10
    fmap_w: int = 20
    bev_h: int = 24
    bev_w: int = 24
    # LiDAR branch
    p_det3d: float = 0.95
    center_jitter: float = 0.1
    size_jitter: float = 0.04
    yaw_jitter: float = 0.05
    n_fp3d: int = 2
    feat_noise3d: float = 0.05
    logit_margin: float = 4.0
    logit_noise: float = 0.5
    bev_bg_noise: float = 0.05
    bev_feat_noise: float = 0.1
    # camera branch
    p_det2d: float = 0.9
    box_jitter_px: float = 1.5
    n_fp2d: int = 1
    feat_noise2d: float = 0.05
    bg_noise: float = 0.2
    posenc_scale: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters plus the nested world/sim configs."""

    epochs: int = 10
    batch_scenes: int = 1
    lr: float = 1e-4
    weight_decay: float = 0.01
    lambda_view: float = 0.2
    lambda_pro: float = 0.1
    topk: int = 2
    match_threshold: float = 0.1
    n_heads: int = 4
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.lambda_view < 0 or self.lambda_pro < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.topk < 1:
            raise ConfigError("topk must be >= 1")
        if self.sim.feat_dim % self.n_heads != 0:
            raise ConfigError("feat_dim must be divisible by n_heads")
        self.scene.validate()


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if f.name == "scene":
            kwargs[name] = _build(SceneConfig, value)
        elif f.name == "sim":
            kwargs[name] = _build(SimConfig, value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def scene_config_from_dict(data: dict) -> SceneConfig:
    return _build(SceneConfig, data)


def sim_config_from_dict(data: dict) -> SimConfig:
    return _build(SimConfig, data)


def train_config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data)


def load_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
