"""Pinhole ground-plane geometry and the resampling tables used by the
geometric (camera-model based) lifting branch.

Coordinate conventions:
    camera frame: x to the right, y downward, z forward along the optical axis.
    ground frame: x lateral (meters, right positive), z depth (meters).
    The optical axis is parallel to the ground and the camera sits
    ``cam_height`` meters above it, so a ground point (x, z) is the camera-frame
    point (x, cam_height, z).
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import torch


class GeometryError(ValueError):
    """Raised for inputs outside the domain of the projection model."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    cam_height: float
    image_w: int = 128
    image_h: int = 128

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.cam_height <= 0:
            raise GeometryError(f"cam_height must be positive, got {self.cam_height}")
        if not (0 <= self.cx <= self.image_w and 0 <= self.cy <= self.image_h):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.image_w}x{self.image_h}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, fx_factor: float = 1.0, fy_factor: float | None = None) -> "CameraIntrinsics":
        fy_factor = fx_factor if fy_factor is None else fy_factor
        return CameraIntrinsics(
            self.fx * fx_factor, self.fy * fy_factor, self.cx, self.cy,
            self.cam_height, self.image_w, self.image_h,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "cam_height": self.cam_height, "image_w": self.image_w, "image_h": self.image_h,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(**d)


def default_intrinsics(image_w: int = 128, image_h: int = 128) -> CameraIntrinsics:
    """Camera with a ~53 degree horizontal field of view, 1.5 m above the road."""
    return CameraIntrinsics(
        fx=float(image_w), fy=float(image_w), cx=image_w / 2, cy=image_h / 2,
        cam_height=1.5, image_w=image_w, image_h=image_h,
    )


@dataclass(frozen=True)
class BevGridSpec:
    """Metric BEV grid. Row index k covers depth [z_min + k*cell, z_min + (k+1)*cell),
    column index j covers lateral [-W/2*cell + j*cell, ...).

    ``extents`` partitions [z_min, z_max) into one depth range per pyramid scale,
    ordered near to far.
    """

    depth_cells: int
    lateral_cells: int
    cell_size: float
    z_min: float
    z_max: float
    extents: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        if not self.extents:
            object.__setattr__(self, "extents", ((self.z_min, self.z_max),))
        object.__setattr__(self, "extents", tuple((float(a), float(b)) for a, b in self.extents))
        if self.z_min <= 0:
            raise GeometryError(f"z_min must be positive, got {self.z_min}")
        if self.depth_cells <= 0 or self.lateral_cells <= 0 or self.cell_size <= 0:
            raise GeometryError("grid dimensions and cell size must be positive")
        if not math.isclose(self.depth_cells * self.cell_size, self.z_max - self.z_min, abs_tol=1e-9):
            raise GeometryError(
                f"depth_cells*cell_size={self.depth_cells * self.cell_size} "
                f"!= z_max-z_min={self.z_max - self.z_min}"
            )
        prev = self.z_min
        for lo, hi in self.extents:
            if not math.isclose(lo, prev, abs_tol=1e-9) or hi <= lo:
                raise GeometryError(f"extents must be ordered and contiguous from z_min: {self.extents}")
            rows = (hi - lo) / self.cell_size
            if not math.isclose(rows, round(rows), abs_tol=1e-9):
                raise GeometryError(f"extent {(lo, hi)} is not a whole number of cells")
            prev = hi
        if not math.isclose(prev, self.z_max, abs_tol=1e-9):
            raise GeometryError(f"extents end at {prev}, grid ends at {self.z_max}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth_cells, self.lateral_cells

    @property
    def x_min(self) -> float:
        return -self.lateral_cells / 2 * self.cell_size

    @property
    def x_max(self) -> float:
        return self.lateral_cells / 2 * self.cell_size

    def extent_rows(self, index: int) -> tuple[int, int]:
        """Row range [start, stop) of extent ``index`` in the full grid."""
        lo, hi = self.extents[index]
        start = int(round((lo - self.z_min) / self.cell_size))
        stop = int(round((hi - self.z_min) / self.cell_size))
        return start, stop

    def extent_depths(self) -> list[int]:
        return [b - a for a, b in map(self.extent_rows, range(len(self.extents)))]

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (x, z) center coordinates, each of shape (Z, W)."""
        z = self.z_min + (np.arange(self.depth_cells) + 0.5) * self.cell_size
        x = self.x_min + (np.arange(self.lateral_cells) + 0.5) * self.cell_size
        zz, xx = np.meshgrid(z, x, indexing="ij")
        return xx, zz

    def to_dict(self) -> dict:
        return {
            "depth_cells": self.depth_cells, "lateral_cells": self.lateral_cells,
            "cell_size": self.cell_size, "z_min": self.z_min, "z_max": self.z_max,
            "extents": [list(e) for e in self.extents],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BevGridSpec":
        d = dict(d)
        d["extents"] = tuple(tuple(e) for e in d.get("extents", ()))
        return cls(**d)


def default_grid() -> BevGridSpec:
    """64x64 cells of 0.5 m covering 1-33 m ahead; fine scale takes the far range."""
    return BevGridSpec(64, 64, 0.5, 1.0, 33.0, ((1.0, 9.0), (9.0, 17.0), (17.0, 33.0)))


def ground_to_pixel(intr: CameraIntrinsics, x, z):
    """Project ground point(s) at lateral ``x``, depth ``z`` to pixel (u, v).

    Works on scalars or numpy arrays. Results may fall outside the image.
    """
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr <= 0):
        raise GeometryError("depth must be positive to project onto the image")
    u = intr.fx * np.asarray(x, dtype=float) / z_arr + intr.cx
    v = intr.fy * intr.cam_height / z_arr + intr.cy
    if np.ndim(u) == 0:
        return float(u), float(v)
    return u, v


def point_to_pixel(intr: CameraIntrinsics, x, height, z):
    """Project a point ``height`` meters above the ground at (x, z)."""
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr <= 0):
        raise GeometryError("depth must be positive to project onto the image")
    u = intr.fx * np.asarray(x, dtype=float) / z_arr + intr.cx
    v = intr.fy * (intr.cam_height - np.asarray(height, dtype=float)) / z_arr + intr.cy
    return u, v


def pixel_to_ground(intr: CameraIntrinsics, u, v):
    """Intersect the viewing ray through pixel (u, v) with the ground plane.

    This is the flat-world (IPM) back-projection; pixels at or above the
    horizon row have no ground intersection.
    """
    dv = np.asarray(v, dtype=float) - intr.cy
    if np.any(dv <= 0):
        raise GeometryError("pixel at or above the horizon does not hit the ground")
    z = intr.fy * intr.cam_height / dv
    x = (np.asarray(u, dtype=float) - intr.cx) * z / intr.fx
    if np.ndim(x) == 0:
        return float(x), float(z)
    return x, z


def frustum_mask(intr: CameraIntrinsics, grid: BevGridSpec) -> np.ndarray:
    """Cells whose centers project inside the image at ground level (Z, W) bool."""
    x, z = grid.cell_centers()
    u, v = ground_to_pixel(intr, x, z)
    return (u >= 0) & (u < intr.image_w) & (v >= 0) & (v < intr.image_h)


@dataclass(frozen=True, eq=False)
class ResampleMap:
    """Precomputed sampling table for one depth extent at one feature scale.

    ``u`` and ``d`` are fractional column / depth-bin coordinates into a polar
    source map of shape (C, depth_bins, width); both arrays are (Z_e, W).
    """

    u: np.ndarray
    d: np.ndarray
    in_bounds: np.ndarray
    depth_bins: int
    width: int

    def __post_init__(self):
        for a in (self.u, self.d, self.in_bounds):
            a.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape


@functools.lru_cache(maxsize=256)
def build_resample_map(
    intr: CameraIntrinsics, grid: BevGridSpec, scale_stride: int, extent_index: int
) -> ResampleMap:
    if not 0 <= extent_index < len(grid.extents):
        raise GeometryError(f"extent index {extent_index} out of range")
    if intr.image_w % scale_stride:
        raise GeometryError(f"stride {scale_stride} does not divide image width {intr.image_w}")
    z_lo, z_hi = grid.extents[extent_index]
    if z_lo <= 0:
        raise GeometryError("extent must start in front of the camera")
    start, stop = grid.extent_rows(extent_index)
    x, z = grid.cell_centers()
    x, z = x[start:stop], z[start:stop]
    depth_bins = stop - start
    width = intr.image_w // scale_stride

    u, _ = ground_to_pixel(intr, x, z)
    u_f = u / scale_stride
    d_f = (z - z_lo) / (z_hi - z_lo) * (depth_bins - 1)
    in_bounds = (u_f >= 0) & (u_f <= width - 1) & (d_f >= 0) & (d_f <= depth_bins - 1)
    return ResampleMap(u_f, d_f, in_bounds, depth_bins, width)


def bilinear_sample(source: torch.Tensor, rmap: ResampleMap) -> torch.Tensor:
    """Sample a polar map (..., C, D, U) at the table's coordinates.

    Returns (..., C, Z_e, W). Out-of-bounds cells are zero.
    """
    if source.shape[-2:] != (rmap.depth_bins, rmap.width):
        raise ValueError(
            f"source map {tuple(source.shape[-2:])} does not match table "
            f"({rmap.depth_bins}, {rmap.width})"
        )
    idx, wts = _bilinear_taps(rmap, source.device, source.dtype)
    flat = source.flatten(-2)
    out = 0
    for tap in range(4):
        out = out + flat[..., idx[tap]] * wts[tap]
    return out.unflatten(-1, rmap.shape)


def _bilinear_taps(rmap: ResampleMap, device, dtype):
    D, U = rmap.depth_bins, rmap.width
    d = np.where(rmap.in_bounds, rmap.d, 0.0)
    u = np.where(rmap.in_bounds, rmap.u, 0.0)
    d0 = np.clip(np.floor(d), 0, max(D - 2, 0)).astype(np.int64)
    u0 = np.clip(np.floor(u), 0, max(U - 2, 0)).astype(np.int64)
    d1 = np.minimum(d0 + 1, D - 1)
    u1 = np.minimum(u0 + 1, U - 1)
    td, tu = d - d0, u - u0
    mask = rmap.in_bounds.astype(float)
    idx = [d0 * U + u0, d0 * U + u1, d1 * U + u0, d1 * U + u1]
    wts = [(1 - td) * (1 - tu), (1 - td) * tu, td * (1 - tu), td * tu]
    idx_t = [torch.as_tensor(i.reshape(-1), device=device) for i in idx]
    wts_t = [torch.as_tensor((w * mask).reshape(-1), device=device, dtype=dtype) for w in wts]
    return idx_t, wts_t
