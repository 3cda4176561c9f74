"""The hybrid lifting network.

A shared convolutional pyramid encoder feeds two view transformers:

* the geometric branch collapses each image column into depth bins with a
  learned dense map and resamples the resulting polar features onto the BEV
  grid through the camera intrinsics;
* the global branch maps every image position to every BEV position of a
  depth extent with a learned dense map and never looks at the intrinsics.

Both branches produce one BEV sub-feature per depth extent; stacking them along
depth gives the full-grid features. A fusion layer and three decoders (fused,
geometric, global) turn features into per-class occupancy probabilities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import (
    BevGridSpec,
    CameraIntrinsics,
    bilinear_sample,
    build_resample_map,
    default_grid,
    default_intrinsics,
)

MODES = ("hybrid", "cbft_only", "cfft_only")


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    image_h: int = 128
    image_w: int = 128
    grid: BevGridSpec = field(default_factory=default_grid)
    mode: str = "hybrid"
    strides: tuple[int, ...] = (8, 16, 32)
    backbone_channels: tuple[int, ...] = (32, 64, 128)
    pyramid_channels: int = 64
    bev_channels: int = 64
    decoder_channels: int = 32
    relation: bool = False
    flat_init: str = "ipm"
    reference_intrinsics: CameraIntrinsics | None = None

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(self.strides))
        object.__setattr__(self, "backbone_channels", tuple(self.backbone_channels))
        if self.mode not in MODES:
            raise ModelConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.strides) != len(self.backbone_channels):
            raise ModelConfigError("one backbone width per stride")
        if len(self.strides) != len(self.grid.extents):
            raise ModelConfigError(
                f"{len(self.strides)} pyramid scales but {len(self.grid.extents)} depth extents"
            )
        s0 = self.strides[0]
        if s0 < 2 or s0 & (s0 - 1) or any(b != 2 * a for a, b in zip(self.strides, self.strides[1:])):
            raise ModelConfigError(f"strides must be powers of two that double per scale: {self.strides}")
        if self.image_h % self.strides[-1] or self.image_w % self.strides[-1]:
            raise ModelConfigError(f"image {self.image_h}x{self.image_w} not divisible by {self.strides[-1]}")
        if self.flat_init not in ("ipm", "random"):
            raise ModelConfigError(f"unknown flat_init {self.flat_init!r}")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.reference_intrinsics or default_intrinsics(self.image_w, self.image_h)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "num_classes", "image_h", "image_w", "mode", "pyramid_channels", "bev_channels",
            "decoder_channels", "relation", "flat_init",
        )}
        d["strides"] = list(self.strides)
        d["backbone_channels"] = list(self.backbone_channels)
        d["grid"] = self.grid.to_dict()
        d["reference_intrinsics"] = self.reference_intrinsics.to_dict() if self.reference_intrinsics else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = BevGridSpec.from_dict(d["grid"])
        if d.get("reference_intrinsics"):
            d["reference_intrinsics"] = CameraIntrinsics.from_dict(d["reference_intrinsics"])
        return cls(**d)


@dataclass
class FeaturePyramid:
    maps: list[torch.Tensor]  # (B, C, H/stride, W/stride), fine to coarse
    strides: tuple[int, ...]


@dataclass
class BevFeatureSet:
    sub_features: list[torch.Tensor]  # per depth extent, near to far: (B, C, Z_e, W)
    concatenated: torch.Tensor  # (B, C, Z, W)

    @classmethod
    def stack(cls, subs: list[torch.Tensor]) -> "BevFeatureSet":
        return cls(list(subs), torch.cat(subs, dim=-2))

    def detach(self) -> "BevFeatureSet":
        return BevFeatureSet.stack([s.detach() for s in self.sub_features])


@dataclass
class ModelOutput:
    scores: torch.Tensor  # (B, C, Z, W)
    branch_scores: dict[str, torch.Tensor | None]
    branch_features: dict[str, BevFeatureSet | None]


def _conv(cin, cout, stride=1, k=3):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _norm(c):
    # at least two channels per group so 1x1 maps still normalize
    return nn.GroupNorm(max(1, min(8, c // 2)), c)


def _block(cin, cout, stride):
    return nn.Sequential(
        _conv(cin, cout, stride), _norm(cout), nn.SiLU(),
        _conv(cout, cout), _norm(cout), nn.SiLU(),
    )


class PyramidEncoder(nn.Module):
    """Strided conv stages with an FPN top-down pathway."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.strides = cfg.strides
        stem, c = [], 3
        for i in range(int(math.log2(cfg.strides[0])) - 1):
            cout = max(8, cfg.backbone_channels[0] // 2)
            stem += [_conv(c, cout, 2), nn.SiLU()]
            c = cout
        self.stem = nn.Sequential(*stem)
        stages = []
        for cout in cfg.backbone_channels:
            stages.append(_block(c, cout, 2))
            c = cout
        self.stages = nn.ModuleList(stages)
        P = cfg.pyramid_channels
        self.lateral = nn.ModuleList(nn.Conv2d(c, P, 1) for c in cfg.backbone_channels)
        self.smooth = nn.ModuleList(_conv(P, P) for _ in cfg.backbone_channels)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        s = self.strides[-1]
        if image.shape[-1] % s or image.shape[-2] % s:
            raise ValueError(f"image size {tuple(image.shape[-2:])} not divisible by stride {s}")
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        out = [None] * len(feats)
        top = None
        for i in reversed(range(len(feats))):
            lat = self.lateral[i](feats[i])
            if top is not None:
                lat = lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            top = lat
            out[i] = F.silu(self.smooth[i](lat))
        return FeaturePyramid(out, self.strides)


def _extent_for_scale(s: int, n: int) -> int:
    # coarse maps cover the near range, fine maps the far range
    return n - 1 - s


class GeometricTransformer(nn.Module):
    """Column-wise height-to-depth collapse followed by intrinsics-driven resampling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.grid = cfg.grid
        self.strides = cfg.strides
        self.bev_channels = cfg.bev_channels
        depths = cfg.grid.extent_depths()
        P = cfg.pyramid_channels
        self.flat = nn.ParameterList()
        self.depth_bins = []
        for s, stride in enumerate(cfg.strides):
            H_s = cfg.image_h // stride
            D = depths[_extent_for_scale(s, len(cfg.strides))]
            self.depth_bins.append(D)
            w = torch.empty(cfg.bev_channels * D, P * H_s)
            if cfg.flat_init == "ipm":
                w.copy_(self._ipm_weight(cfg, s, H_s, D))
            else:
                nn.init.normal_(w, std=1.0 / math.sqrt(P * H_s))
            self.flat.append(nn.Parameter(w))

    def _ipm_weight(self, cfg, s, H_s, D) -> torch.Tensor:
        """Each depth bin copies the feature row where the ground at that
        depth appears, channel for channel."""
        intr = cfg.intrinsics
        z_lo, z_hi = cfg.grid.extents[_extent_for_scale(s, len(cfg.strides))]
        P, Cb = cfg.pyramid_channels, cfg.bev_channels
        w = torch.zeros(Cb, D, P, H_s)
        for d in range(D):
            z = z_lo + (d / max(D - 1, 1)) * (z_hi - z_lo)
            row = (intr.fy * intr.cam_height / z + intr.cy) / cfg.strides[s]
            if not 0 <= row <= H_s - 1:
                continue
            r0 = min(int(math.floor(row)), max(H_s - 2, 0))
            t = row - r0
            for c in range(min(P, Cb)):
                w[c, d, c, r0] += 1 - t
                if t > 0:
                    w[c, d, c, r0 + 1] += t
        return w.reshape(Cb * D, P * H_s)

    def flatten_scale(self, s: int, fmap: torch.Tensor) -> torch.Tensor:
        """(B, P, H_s, W_s) -> polar map (B, C_b, D, W_s)."""
        B, P, H, W = fmap.shape
        cols = fmap.permute(0, 3, 1, 2).reshape(B, W, P * H)
        polar = cols @ self.flat[s].t()
        return polar.reshape(B, W, self.bev_channels, self.depth_bins[s]).permute(0, 2, 3, 1)

    def forward(self, pyr: FeaturePyramid, intrinsics: Sequence[CameraIntrinsics]) -> BevFeatureSet:
        n = len(self.strides)
        if len(pyr.maps) != n:
            raise ModelConfigError(f"pyramid has {len(pyr.maps)} scales, grid has {n} extents")
        subs = [None] * n
        for s, fmap in enumerate(pyr.maps):
            e = _extent_for_scale(s, n)
            polar = self.flatten_scale(s, fmap)
            subs[e] = _sample_per_intrinsics(polar, intrinsics, self.grid, self.strides[s], e)
        return BevFeatureSet.stack(subs)


def _sample_per_intrinsics(polar, intrinsics, grid, stride, extent):
    if len(set(intrinsics)) == 1:
        return bilinear_sample(polar, build_resample_map(intrinsics[0], grid, stride, extent))
    return torch.stack([
        bilinear_sample(polar[b], build_resample_map(intr, grid, stride, extent))
        for b, intr in enumerate(intrinsics)
    ])


class CrossViewRelation(nn.Module):
    """Single-head cross attention: BEV tokens attend to image tokens."""

    def __init__(self, channels: int, n_bev: int):
        super().__init__()
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)
        self.out = nn.Linear(channels, channels, bias=False)
        self.pos = nn.Parameter(torch.zeros(n_bev, channels))
        nn.init.zeros_(self.out.weight)

    def forward(self, bev: torch.Tensor, fv: torch.Tensor) -> torch.Tensor:
        """bev (B, N_bev, C), fv (B, N_fv, C) -> refined bev tokens."""
        q = self.q(bev + self.pos)
        att = torch.softmax(q @ self.k(fv).transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        return bev + self.out(att @ self.v(fv))


class GlobalTransformer(nn.Module):
    """Dense image-position to BEV-position mapping per depth extent."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.strides = cfg.strides
        self.grid = cfg.grid
        depths = cfg.grid.extent_depths()
        n = len(cfg.strides)
        W = cfg.grid.lateral_cells
        self.proj = nn.ModuleList(nn.Conv2d(cfg.pyramid_channels, cfg.bev_channels, 1, bias=False) for _ in cfg.strides)
        self.mlp = nn.ModuleList()
        self.relation = nn.ModuleList() if cfg.relation else None
        self.out_shapes = []
        for s, stride in enumerate(cfg.strides):
            n_fv = (cfg.image_h // stride) * (cfg.image_w // stride)
            Z_e = depths[_extent_for_scale(s, n)]
            lin = nn.Linear(n_fv, Z_e * W)
            nn.init.normal_(lin.weight, std=1.0 / math.sqrt(n_fv))
            nn.init.zeros_(lin.bias)
            self.mlp.append(lin)
            self.out_shapes.append((Z_e, W))
            if cfg.relation:
                self.relation.append(CrossViewRelation(cfg.bev_channels, Z_e * W))

    def forward(self, pyr: FeaturePyramid) -> BevFeatureSet:
        n = len(self.strides)
        if len(pyr.maps) != n:
            raise ModelConfigError(f"pyramid has {len(pyr.maps)} scales, grid has {n} extents")
        subs = [None] * n
        for s, fmap in enumerate(pyr.maps):
            x = self.proj[s](fmap).flatten(2)  # (B, C_b, N_fv)
            bev = self.mlp[s](x)  # (B, C_b, N_bev)
            if self.relation is not None:
                bev = self.relation[s](bev.transpose(1, 2), x.transpose(1, 2)).transpose(1, 2)
            subs[_extent_for_scale(s, n)] = bev.unflatten(-1, self.out_shapes[s])
        return BevFeatureSet.stack(subs)


class Fusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, geo: BevFeatureSet, glo: BevFeatureSet) -> torch.Tensor:
        a, b = geo.concatenated, glo.concatenated
        if a.shape != b.shape:
            raise ValueError(f"branch feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        return self.proj(torch.cat([a, b], dim=1))


class Decoder(nn.Module):
    def __init__(self, cin: int, width: int, num_classes: int):
        super().__init__()
        self.body = nn.Sequential(
            _conv(cin, width), _norm(width), nn.SiLU(),
            _conv(width, width), nn.SiLU(),
        )
        self.head = nn.Conv2d(width, num_classes, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


# submodules that exist in each mode
MODE_MODULES = {
    "cbft_only": ("encoder", "geometric", "decoder_geo"),
    "cfft_only": ("encoder", "global_", "decoder_glo"),
    "hybrid": ("encoder", "geometric", "global_", "fusion", "decoder", "decoder_geo", "decoder_glo"),
}


class HFTNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        C, D = cfg.bev_channels, cfg.decoder_channels
        needed = MODE_MODULES[cfg.mode]
        self.encoder = PyramidEncoder(cfg)
        self.geometric = GeometricTransformer(cfg) if "geometric" in needed else None
        self.global_ = GlobalTransformer(cfg) if "global_" in needed else None
        self.fusion = Fusion(C) if "fusion" in needed else None
        self.decoder = Decoder(C, D, cfg.num_classes) if "decoder" in needed else None
        self.decoder_geo = Decoder(C, D, cfg.num_classes) if "decoder_geo" in needed else None
        self.decoder_glo = Decoder(C, D, cfg.num_classes) if "decoder_glo" in needed else None

    def encode(self, image: torch.Tensor) -> FeaturePyramid:
        return self.encoder(image)

    def forward(self, image: torch.Tensor, intrinsics, mode: str | None = None) -> ModelOutput:
        """``image`` is (B, 3, H, W); ``intrinsics`` one CameraIntrinsics or one per sample."""
        mode = mode or self.cfg.mode
        if mode not in MODES:
            raise ModelConfigError(f"unknown mode {mode!r}")
        missing = [m for m in MODE_MODULES[mode] if getattr(self, m) is None]
        if missing:
            raise ModelConfigError(f"a {self.cfg.mode} model cannot run in {mode} mode")
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if isinstance(intrinsics, CameraIntrinsics):
            intrinsics = [intrinsics] * image.shape[0]
        pyr = self.encode(image)
        geo = glo = None
        scores_geo = scores_glo = None
        if mode in ("hybrid", "cbft_only"):
            geo = self.geometric(pyr, intrinsics)
            scores_geo = self.decoder_geo(geo.concatenated)
        if mode in ("hybrid", "cfft_only"):
            glo = self.global_(pyr)
            scores_glo = self.decoder_glo(glo.concatenated)
        if mode == "hybrid":
            scores = self.decoder(self.fusion(geo, glo))
        else:
            scores = scores_geo if mode == "cbft_only" else scores_glo
        return ModelOutput(scores, {"geo": scores_geo, "glo": scores_glo}, {"geo": geo, "glo": glo})


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> HFTNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HFTNet(cfg)
    return model.to(dtype)


def param_count(model: nn.Module, mode: str | None = None) -> dict[str, int]:
    """Trainable scalar parameters per submodule plus ``total``.

    For an HFTNet, ``mode`` restricts the count to the submodules that mode
    runs (defaults to the model's own mode).
    """
    if not isinstance(model, HFTNet):
        n = sum(p.numel() for p in model.parameters() if p.requires_grad)
        return {"total": n}
    mode = mode or model.cfg.mode
    out = {}
    for name in MODE_MODULES[mode]:
        mod = getattr(model, name)
        if mod is None:
            raise ModelConfigError(f"{name} is not built in a {model.cfg.mode} model")
        out[name.rstrip("_")] = sum(p.numel() for p in mod.parameters() if p.requires_grad)
    out["total"] = sum(out.values())
    return out


def branch_parameters(model: HFTNet, branch: str) -> list[nn.Parameter]:
    """Parameters that only the given branch ("geo" or "glo") owns."""
    names = ("geometric", "decoder_geo") if branch == "geo" else ("global_", "decoder_glo")
    return [p for n in names if getattr(model, n) is not None for p in getattr(model, n).parameters()]
