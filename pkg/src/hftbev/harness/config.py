"""JSON run configuration. Unknown keys are rejected at every level."""
from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..geometry import BevGridSpec, CameraIntrinsics, default_grid, default_intrinsics
from ..losses import DISTANCES, SCHEMES, LossWeights, SchemeConfig
from ..net import MODES, ModelConfig
from ..synthworld import SceneConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


class GridModel(_Strict):
    depth_cells: int = 64
    lateral_cells: int = 64
    cell_size: float = 0.5
    z_min: float = 1.0
    z_max: float = 33.0
    extents: list[tuple[float, float]] = [(1.0, 9.0), (9.0, 17.0), (17.0, 33.0)]

    def build(self) -> BevGridSpec:
        return BevGridSpec(self.depth_cells, self.lateral_cells, self.cell_size, self.z_min,
                           self.z_max, tuple(tuple(e) for e in self.extents))


class IntrinsicsModel(_Strict):
    fx: float = 128.0
    fy: float = 128.0
    cx: float = 64.0
    cy: float = 64.0
    cam_height: float = 1.5
    image_w: int = 128
    image_h: int = 128

    def build(self) -> CameraIntrinsics:
        return CameraIntrinsics(**self.model_dump())


class SceneModel(_Strict):
    class_names: list[str] = list(SceneConfig().class_names)
    count_range: tuple[int, int] = (1, 5)
    elevated_prob: float = 0.2
    elevation_range: tuple[float, float] = (0.8, 2.5)
    road_width: tuple[float, float] = (7.0, 11.0)
    walkway_width: tuple[float, float] = (1.5, 3.0)
    walkway_prob: float = 0.85
    max_curvature: float = 0.008

    def build(self) -> SceneConfig:
        return SceneConfig(**self.model_dump())


class GenConfig(_Strict):
    """Input to ``gen-data``."""

    scene: SceneModel = SceneModel()
    grid: GridModel = GridModel()
    intrinsics: IntrinsicsModel = IntrinsicsModel()
    focal_jitter: float = Field(0.0, ge=0.0, lt=0.5)
    splits: str = "train:200,val:50"


class ModelSection(_Strict):
    mode: Literal["hybrid", "cbft_only", "cfft_only"] = "hybrid"
    strides: list[int] = [8, 16, 32]
    backbone_channels: list[int] = [32, 64, 128]
    pyramid_channels: int = 64
    bev_channels: int = 64
    decoder_channels: int = 32
    relation: bool = False
    flat_init: Literal["ipm", "random"] = "ipm"


class LossSection(_Strict):
    lambda1: float = Field(0.05, ge=0)
    lambda2: float = Field(0.01, ge=0)
    alpha: float = Field(0.001, ge=0)
    beta: float = Field(1.0, ge=0)
    class_weights: Optional[list[float]] = None
    class_weight_norm: Literal["mean", "max", "none"] = "mean"
    class_weight_cap: float = Field(0.75, gt=0)
    neg_ratio: int = Field(3, ge=0)
    neg_factor_cap: float = Field(0.99, gt=0, le=1)


class SchemeSection(_Strict):
    scheme: str = "output_sim"
    distance: str = "L2"

    @field_validator("scheme")
    @classmethod
    def _scheme(cls, v):
        if v not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        return v

    @field_validator("distance")
    @classmethod
    def _distance(cls, v):
        if v not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        return v


class OptimizerSection(_Strict):
    name: Literal["adamw"] = "adamw"
    lr: float = Field(2e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    clip_norm: float = Field(5.0, gt=0)
    decay_epochs: list[int] = [22, 26]
    decay_factor: float = Field(0.1, gt=0)


class AugmentSection(_Strict):
    hflip: float = Field(0.5, ge=0, le=1)
    photometric: bool = False


class RunConfig(_Strict):
    data: str = ""
    out: str = "runs/default"
    grid: Optional[GridModel] = None
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    scheme: SchemeSection = SchemeSection()
    optimizer: OptimizerSection = OptimizerSection()
    augment: AugmentSection = AugmentSection()
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(8, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    seed: int = 0
    train_split: str = "train"
    val_split: Optional[str] = "val"
    dtype: Literal["float32", "float64"] = "float32"
    log_every: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if any(e >= self.epochs for e in self.optimizer.decay_epochs):
            raise ValueError(
                f"decay epochs {self.optimizer.decay_epochs} must be < total epochs {self.epochs}"
            )
        if self.model.mode != "hybrid" and self.scheme.scheme != "none":
            raise ValueError(f"scheme {self.scheme.scheme!r} needs the hybrid model; use 'none'")
        return self

    def build_model_config(self, num_classes: int, grid: BevGridSpec, intr: CameraIntrinsics) -> ModelConfig:
        m = self.model
        return ModelConfig(
            num_classes=num_classes, image_h=intr.image_h, image_w=intr.image_w, grid=grid,
            mode=m.mode, strides=tuple(m.strides), backbone_channels=tuple(m.backbone_channels),
            pyramid_channels=m.pyramid_channels, bev_channels=m.bev_channels,
            decoder_channels=m.decoder_channels, relation=m.relation, flat_init=m.flat_init,
            reference_intrinsics=intr,
        )

    def loss_weights(self, class_weights) -> LossWeights:
        l = self.loss
        return LossWeights(l.lambda1, l.lambda2, l.alpha, l.beta, list(class_weights),
                           l.neg_ratio, l.neg_factor_cap)

    def scheme_config(self) -> SchemeConfig:
        return SchemeConfig(self.scheme.scheme, self.scheme.distance)

    def updated(self, **changes) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``updated(**{"model.mode": "cbft_only"})``."""
        d = self.model_dump()
        for path, value in changes.items():
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return RunConfig.model_validate(d)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e


def load_run_config(path_or_dict: Union[str, Path, dict]) -> RunConfig:
    d = path_or_dict if isinstance(path_or_dict, dict) else _load_json(path_or_dict)
    try:
        return RunConfig.model_validate(d)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_gen_config(path_or_dict) -> GenConfig:
    d = path_or_dict if isinstance(path_or_dict, dict) else _load_json(path_or_dict)
    try:
        return GenConfig.model_validate(d)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose ("init", "data_order", ...)."""
    key = (zlib.crc32(name.encode()),) + tuple(int(x) for x in extra)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def substream_seed(seed: int, name: str, *extra: int) -> int:
    return int(substream(seed, name, *extra).integers(2**31 - 1))
