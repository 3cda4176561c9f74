"""Flat-shaded rasterization of scenes into the camera image and BEV label maps."""
from __future__ import annotations

import numpy as np
import shapely
from PIL import Image, ImageDraw
from shapely.geometry import MultiPoint, Polygon

from ..geometry import BevGridSpec, CameraIntrinsics, frustum_mask, point_to_pixel
from .scene import CLASS_CATALOGUE, Box, Scene

SKY = (150, 190, 235)
TERRAIN = (95, 125, 70)
FRONT_FACE_SHADE = 0.75
NEAR_CLIP = 0.2


def background(image_h: int, image_w: int, intr: CameraIntrinsics) -> np.ndarray:
    img = np.empty((image_h, image_w, 3), dtype=np.uint8)
    horizon = int(np.clip(np.ceil(intr.cy), 0, image_h))
    img[:horizon] = SKY
    img[horizon:] = TERRAIN
    return img


def object_color(class_name: str, shade: float, face: float = 1.0) -> tuple[int, int, int]:
    base = np.asarray(CLASS_CATALOGUE[class_name]["color"], dtype=float)
    return tuple(int(c) for c in np.clip(np.round(base * shade * face), 0, 255))


def _project(intr, pts_xhz):
    u, v = point_to_pixel(intr, pts_xhz[:, 0], pts_xhz[:, 1], pts_xhz[:, 2])
    return list(zip(u.tolist(), v.tolist()))


def _draw_polygon(draw: ImageDraw.ImageDraw, pts, color):
    if len(pts) >= 3:
        draw.polygon([(float(u), float(v)) for u, v in pts], fill=color)


def render_fv(scene: Scene, intr: CameraIntrinsics, class_names, image_h: int = 128, image_w: int = 128) -> np.ndarray:
    """Render the camera view as an (H, W, 3) uint8 array.

    Ground regions are painted first (in list order), then boxes from far to
    near so nearer objects overwrite farther ones.
    """
    img = Image.fromarray(background(image_h, image_w, intr))
    draw = ImageDraw.Draw(img)
    near = Polygon([(-1e4, NEAR_CLIP), (1e4, NEAR_CLIP), (1e4, 1e4), (-1e4, 1e4)])
    for region in scene.ground:
        poly = Polygon(region.polygon).intersection(near)
        if poly.is_empty:
            continue
        for part in getattr(poly, "geoms", [poly]):
            if not isinstance(part, Polygon):
                continue
            xz = np.asarray(part.exterior.coords[:-1])
            pts = np.column_stack([xz[:, 0], np.zeros(len(xz)), xz[:, 1]])
            _draw_polygon(draw, _project(intr, pts), object_color(class_names[region.class_id], region.shade))

    for b in sorted(scene.boxes, key=lambda b: (-b.z, b.x)):
        _draw_box(draw, intr, b, class_names[b.class_id])
    return np.asarray(img)


def _draw_box(draw, intr, b: Box, class_name: str):
    corners = b.corners()
    if corners[:, 2].min() <= NEAR_CLIP:
        return
    hull = MultiPoint(_project(intr, corners)).convex_hull
    if isinstance(hull, Polygon):
        _draw_polygon(draw, hull.exterior.coords[:-1], object_color(class_name, b.shade))
    front = corners[corners[:, 2] == corners[:, 2].min()]
    front = front[[0, 1, 3, 2]]  # (x0,y0) (x0,y1) (x1,y1) (x1,y0)
    _draw_polygon(draw, _project(intr, front), object_color(class_name, b.shade, FRONT_FACE_SHADE))


def render_bev_gt(scene: Scene, grid: BevGridSpec, intr: CameraIntrinsics, num_classes: int):
    """Rasterize object footprints onto the grid by cell-center membership.

    Returns (labels (C, Z, W) uint8, validity (Z, W) uint8). Labels outside the
    camera frustum are cleared.
    """
    x, z = grid.cell_centers()
    labels = np.zeros((num_classes, *grid.shape), dtype=np.uint8)
    for region in scene.ground:
        labels[region.class_id] |= shapely.contains_xy(Polygon(region.polygon), x, z).astype(np.uint8)
    for b in scene.boxes:
        x0, x1, z0, z1 = b.footprint
        labels[b.class_id] |= ((x >= x0) & (x < x1) & (z >= z0) & (z < z1)).astype(np.uint8)
    validity = frustum_mask(intr, grid).astype(np.uint8)
    labels *= validity[None]
    return labels, validity
