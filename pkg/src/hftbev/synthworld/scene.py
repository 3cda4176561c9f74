"""Procedural road scenes: ground regions (drivable area, walkways, ...) plus
axis-aligned 3D boxes for dynamic objects, some of which float above the road
on ramps/overpasses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import shapely
from shapely.geometry import Polygon, box as shapely_box

from ..geometry import BevGridSpec, default_grid


class SceneConfigError(ValueError):
    pass


# kind, placement, (w, l, h) ranges, rgb
CLASS_CATALOGUE = {
    "drivable": dict(kind="ground", color=(90, 90, 96)),
    "ped_crossing": dict(kind="ground", color=(230, 230, 225)),
    "walkway": dict(kind="ground", color=(190, 160, 120)),
    "carpark": dict(kind="ground", color=(120, 110, 140)),
    "vehicle": dict(kind="box", on="road", size=((1.7, 2.0), (3.8, 4.8), (1.4, 1.7)), color=(40, 90, 220)),
    "car": dict(kind="box", on="road", size=((1.7, 2.0), (3.8, 4.8), (1.4, 1.7)), color=(40, 90, 220)),
    "truck": dict(kind="box", on="road", size=((2.3, 2.6), (6.0, 9.0), (2.8, 3.5)), color=(200, 60, 40)),
    "bus": dict(kind="box", on="road", size=((2.5, 2.6), (10.0, 12.0), (3.0, 3.4)), color=(240, 170, 20)),
    "trailer": dict(kind="box", on="road", size=((2.4, 2.6), (7.0, 10.0), (3.0, 3.8)), color=(150, 80, 30)),
    "construction_vehicle": dict(kind="box", on="road", size=((2.5, 3.0), (5.0, 7.0), (2.8, 3.4)), color=(250, 220, 60)),
    "pedestrian": dict(kind="box", on="walkway", size=((0.5, 0.7), (0.5, 0.7), (1.6, 1.9)), color=(220, 40, 160)),
    "motorcycle": dict(kind="box", on="road", size=((0.7, 0.9), (1.8, 2.2), (1.2, 1.5)), color=(30, 200, 200)),
    "bicycle": dict(kind="box", on="walkway", size=((0.5, 0.7), (1.6, 1.9), (1.0, 1.3)), color=(120, 220, 60)),
    "traffic_cone": dict(kind="box", on="walkway", size=((0.4, 0.5), (0.4, 0.5), (0.6, 0.8)), color=(255, 120, 0)),
    "barrier": dict(kind="box", on="walkway", size=((1.5, 2.5), (0.3, 0.5), (0.8, 1.1)), color=(180, 180, 40)),
}

DEFAULT_CLASSES = ("drivable", "walkway", "vehicle", "pedestrian")
NUSCENES_CLASSES = (
    "drivable", "ped_crossing", "walkway", "carpark", "car", "truck", "bus", "trailer",
    "construction_vehicle", "pedestrian", "motorcycle", "bicycle", "traffic_cone", "barrier",
)


@dataclass(frozen=True)
class SceneConfig:
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    count_range: tuple[int, int] = (1, 5)
    elevated_prob: float = 0.0
    elevation_range: tuple[float, float] = (0.8, 2.5)
    road_width: tuple[float, float] = (7.0, 11.0)
    walkway_width: tuple[float, float] = (1.5, 3.0)
    walkway_prob: float = 0.85
    max_curvature: float = 0.008

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "count_range", tuple(self.count_range))
        object.__setattr__(self, "elevation_range", tuple(self.elevation_range))
        object.__setattr__(self, "road_width", tuple(self.road_width))
        object.__setattr__(self, "walkway_width", tuple(self.walkway_width))
        if not self.class_names:
            raise SceneConfigError("class set is empty")
        unknown = [c for c in self.class_names if c not in CLASS_CATALOGUE]
        if unknown:
            raise SceneConfigError(f"unknown classes {unknown}")
        if len(set(self.class_names)) != len(self.class_names):
            raise SceneConfigError("duplicate class names")
        if len(self.class_names) > 16:
            raise SceneConfigError("at most 16 classes fit the 16-bit label encoding")
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise SceneConfigError(f"bad count range {self.count_range}")
        if not 0.0 <= self.elevated_prob <= 1.0:
            raise SceneConfigError("elevated_prob must be in [0, 1]")
        if self.elevation_range[0] <= 0 or self.elevation_range[1] < self.elevation_range[0]:
            raise SceneConfigError(f"bad elevation range {self.elevation_range}")

    @property
    def static_ids(self) -> list[int]:
        return [i for i, c in enumerate(self.class_names) if CLASS_CATALOGUE[c]["kind"] == "ground"]

    @property
    def dynamic_ids(self) -> list[int]:
        return [i for i, c in enumerate(self.class_names) if CLASS_CATALOGUE[c]["kind"] == "box"]

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names), "count_range": list(self.count_range),
            "elevated_prob": self.elevated_prob, "elevation_range": list(self.elevation_range),
            "road_width": list(self.road_width), "walkway_width": list(self.walkway_width),
            "walkway_prob": self.walkway_prob, "max_curvature": self.max_curvature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class GroundRegion:
    class_id: int
    polygon: list[tuple[float, float]]  # (x, z) vertices
    shade: float = 1.0


@dataclass
class Box:
    class_id: int
    x: float
    z: float
    width: float
    length: float
    height: float
    elevation: float = 0.0
    shade: float = 1.0

    def __post_init__(self):
        if min(self.width, self.length, self.height) <= 0:
            raise SceneConfigError(f"degenerate box {self}")
        if self.elevation < 0:
            raise SceneConfigError("elevation must be non-negative")

    @property
    def footprint(self) -> tuple[float, float, float, float]:
        """(x_lo, x_hi, z_lo, z_hi)"""
        return (self.x - self.width / 2, self.x + self.width / 2,
                self.z - self.length / 2, self.z + self.length / 2)

    def corners(self) -> np.ndarray:
        """8 x 3 array of (x, height above ground, z)."""
        x0, x1, z0, z1 = self.footprint
        y0, y1 = self.elevation, self.elevation + self.height
        return np.array([(x, y, z) for x in (x0, x1) for y in (y0, y1) for z in (z0, z1)])


@dataclass
class Scene:
    seed: int
    ground: list[GroundRegion] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)

    @property
    def drivable(self) -> list[GroundRegion]:
        return [g for g in self.ground if g.class_id == 0]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ground": [
                {"class_id": g.class_id, "polygon": [list(p) for p in g.polygon], "shade": g.shade}
                for g in self.ground
            ],
            "boxes": [vars(b).copy() for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            seed=d["seed"],
            ground=[GroundRegion(g["class_id"], [tuple(p) for p in g["polygon"]], g["shade"]) for g in d["ground"]],
            boxes=[Box(**b) for b in d["boxes"]],
        )


def _clip_to_grid(poly: Polygon, grid: BevGridSpec) -> list[list[tuple[float, float]]]:
    bounds = shapely_box(grid.x_min, grid.z_min, grid.x_max, grid.z_max)
    clipped = poly.intersection(bounds)
    if clipped.is_empty:
        return []
    parts = getattr(clipped, "geoms", [clipped])
    return [
        [(float(x), float(z)) for x, z in p.exterior.coords[:-1]]
        for p in parts if isinstance(p, Polygon) and p.area > 1e-6
    ]


def _strip(center, z, left, right) -> Polygon:
    """Band between lateral offsets ``left`` < ``right`` from the road centerline."""
    xs_l = center + left
    xs_r = center + right
    pts = list(zip(xs_l, z)) + list(zip(xs_r[::-1], z[::-1]))
    return Polygon(pts)


def sample_scene(seed: int, config: SceneConfig = SceneConfig(), grid: BevGridSpec | None = None) -> Scene:
    """Draw a scene deterministically from ``seed``.

    Every box class gets a count drawn uniformly from ``config.count_range``.
    """
    grid = grid or default_grid()
    rng = np.random.default_rng(seed)
    names = config.class_names
    scene = Scene(seed=seed)

    z = np.linspace(grid.z_min, grid.z_max, int(grid.z_max - grid.z_min) + 1)
    offset = rng.uniform(-0.15, 0.15) * (grid.x_max - grid.x_min)
    curv = rng.uniform(-config.max_curvature, config.max_curvature)
    center = offset + curv * (z - grid.z_min) ** 2
    half = rng.uniform(*config.road_width) / 2

    walk_offsets = []
    for side in (-1, 1):
        if rng.random() < config.walkway_prob:
            w = rng.uniform(*config.walkway_width)
            walk_offsets.append((half, half + w) if side > 0 else (-half - w, -half))
    if not walk_offsets:
        walk_offsets.append((half, half + config.walkway_width[0]))
    regions = {
        "road": [_strip(center, z, -half, half)],
        "walkway": [_strip(center, z, lo, hi) for lo, hi in walk_offsets],
    }

    def add_ground(name, polys):
        if name not in names:
            return
        for poly in polys:
            for pts in _clip_to_grid(poly, grid):
                scene.ground.append(GroundRegion(names.index(name), pts, float(rng.uniform(0.85, 1.15))))

    add_ground("drivable", regions["road"])
    if "ped_crossing" in names:
        zc = rng.uniform(grid.z_min + 4, grid.z_max - 4)
        xc = offset + curv * (zc - grid.z_min) ** 2
        add_ground("ped_crossing", [shapely_box(xc - half, zc - 1.5, xc + half, zc + 1.5)])
    add_ground("walkway", regions["walkway"])
    if "carpark" in names:
        zc = rng.uniform(grid.z_min + 6, grid.z_max - 6)
        xc = offset + curv * (zc - grid.z_min) ** 2 + rng.choice([-1, 1]) * (half + 6)
        add_ground("carpark", [shapely_box(xc - 4, zc - 5, xc + 4, zc + 5)])

    taken: list[Polygon] = []
    for cid, name in enumerate(names):
        spec = CLASS_CATALOGUE[name]
        if spec["kind"] != "box":
            continue
        count = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
        for _ in range(count):
            scene.boxes.append(_place_box(rng, cid, spec, config, grid, center, z, half, walk_offsets, taken))
    return scene


def _place_box(rng, cid, spec, config, grid, center, z, half, walk_offsets, taken) -> Box:
    (w_lo, w_hi), (l_lo, l_hi), (h_lo, h_hi) = spec["size"]
    w, l, h = rng.uniform(w_lo, w_hi), rng.uniform(l_lo, l_hi), rng.uniform(h_lo, h_hi)
    elev = 0.0
    if config.elevated_prob > 0 and rng.random() < config.elevated_prob:
        elev = float(rng.uniform(*config.elevation_range))
    shade = float(rng.uniform(0.8, 1.2))
    # stay 3 m beyond z_min so the box is inside the visible wedge
    z_lo = min(grid.z_min + 3.0 + l / 2, grid.z_max - l / 2)
    z_hi = grid.z_max - l / 2
    x_lim = (grid.x_min + w / 2, grid.x_max - w / 2)
    cand = None
    for attempt in range(50):
        zc = rng.uniform(z_lo, z_hi)
        xc0 = np.interp(zc, z, center)
        if spec["on"] == "road":
            xc = xc0 + rng.uniform(-half + w / 2, half - w / 2)
        else:
            lo, hi = walk_offsets[int(rng.integers(len(walk_offsets)))]
            xc = xc0 + rng.uniform(lo + w / 2, max(hi - w / 2, lo + w / 2))
        xc = float(np.clip(xc, *x_lim))
        cand = Box(cid, xc, float(zc), w, l, h, elev, shade)
        fp = shapely_box(xc - w / 2 - 0.3, zc - l / 2 - 0.3, xc + w / 2 + 0.3, zc + l / 2 + 0.3)
        if not any(fp.intersects(t) for t in taken):
            taken.append(fp)
            return cand
    taken.append(shapely_box(cand.footprint[0], cand.footprint[2], cand.footprint[1], cand.footprint[3]))
    return cand


def point_in_regions(polygon: list[tuple[float, float]], x: np.ndarray, z: np.ndarray) -> np.ndarray:
    return shapely.contains_xy(Polygon(polygon), x, z)
