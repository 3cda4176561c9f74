"""Sample generation and the on-disk dataset format.

Layout of a dataset directory::

    manifest.json
    fv_{id}.png      8-bit RGB camera image
    bev_{id}.png     16-bit grayscale; bit c set <=> class c occupied
    valid_{id}.png   8-bit, 1 inside the camera frustum
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import BevGridSpec, CameraIntrinsics, default_grid, default_intrinsics
from .render import render_bev_gt, render_fv
from .scene import Scene, SceneConfig, sample_scene

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class DatasetError(Exception):
    """Missing, corrupt or inconsistent dataset on disk."""


@dataclass
class SampleRecord:
    fv_image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    bev_labels: np.ndarray  # (C, Z, W) uint8 {0, 1}
    validity: np.ndarray  # (Z, W) uint8 {0, 1}
    intrinsics: CameraIntrinsics
    scene: Scene
    sample_id: str = ""


def make_sample(
    seed: int,
    config: SceneConfig = SceneConfig(),
    grid: BevGridSpec | None = None,
    intr: CameraIntrinsics | None = None,
    sample_id: str = "",
) -> SampleRecord:
    grid = grid or default_grid()
    intr = intr or default_intrinsics()
    scene = sample_scene(seed, config, grid)
    img = render_fv(scene, intr, config.class_names, intr.image_h, intr.image_w)
    labels, valid = render_bev_gt(scene, grid, intr, len(config.class_names))
    return SampleRecord(img.astype(np.float32) / 255.0, labels, valid, intr, scene, sample_id)


def parse_splits(spec: str | dict, n: int) -> dict[str, list[int]]:
    """``"train:200,val:50"`` -> consecutive index ranges per split name."""
    if isinstance(spec, dict):
        items = list(spec.items())
    else:
        items = []
        for part in spec.split(","):
            name, _, count = part.partition(":")
            items.append((name.strip(), int(count)))
    out, start = {}, 0
    for name, count in items:
        out[name] = list(range(start, start + int(count)))
        start += int(count)
    if start != n:
        raise DatasetError(f"split sizes sum to {start}, dataset has {n} samples")
    return out


def generate_samples(
    n: int,
    seed: int,
    config: SceneConfig = SceneConfig(),
    grid: BevGridSpec | None = None,
    intr: CameraIntrinsics | None = None,
    focal_jitter: float = 0.0,
) -> list[SampleRecord]:
    """``n`` samples with independent per-sample seeds spawned from ``seed``.

    ``focal_jitter`` scales fx, fy per sample by a factor in [1-j, 1+j].
    """
    intr = intr or default_intrinsics()
    children = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for i, child in enumerate(children):
        scene_seed = int(child.generate_state(1)[0])
        s_intr = intr
        if focal_jitter:
            f = float(np.random.default_rng(child).uniform(1 - focal_jitter, 1 + focal_jitter))
            s_intr = intr.scaled(f)
        samples.append(make_sample(scene_seed, config, grid, s_intr, sample_id=f"{i:05d}"))
    return samples


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def encode_bitmask(labels: np.ndarray) -> np.ndarray:
    out = np.zeros(labels.shape[1:], dtype=np.uint16)
    for c in range(labels.shape[0]):
        out |= (labels[c].astype(np.uint16) & 1) << c
    return out


def decode_bitmask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    mask = mask.astype(np.uint16)
    return np.stack([((mask >> c) & 1).astype(np.uint8) for c in range(num_classes)])


def write_dataset(
    samples: list[SampleRecord],
    directory,
    grid: BevGridSpec,
    config: SceneConfig,
    splits: str | dict | None = None,
    seed: int | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits = parse_splits(splits or {"train": len(samples)}, len(samples))
    entries = []
    for i, s in enumerate(samples):
        sid = s.sample_id or f"{i:05d}"
        if s.bev_labels.shape[0] != len(config.class_names):
            raise DatasetError(f"sample {sid} has {s.bev_labels.shape[0]} label channels")
        files = {
            "fv": f"fv_{sid}.png",
            "bev": f"bev_{sid}.png",
            "valid": f"valid_{sid}.png",
        }
        Image.fromarray(_to_u8(s.fv_image)).save(directory / files["fv"])
        Image.fromarray(encode_bitmask(s.bev_labels)).save(directory / files["bev"])
        Image.fromarray(s.validity.astype(np.uint8)).save(directory / files["valid"])
        entries.append({
            "id": sid,
            "intrinsics": s.intrinsics.to_dict(),
            "scene": s.scene.to_dict(),
            "files": files,
            "sha256": {k: _sha256(directory / f) for k, f in files.items()},
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "class_names": list(config.class_names),
        "static_ids": config.static_ids,
        "dynamic_ids": config.dynamic_ids,
        "grid": grid.to_dict(),
        "scene_config": config.to_dict(),
        "seed": seed,
        "splits": {k: [entries[i]["id"] for i in v] for k, v in splits.items()},
        "samples": entries,
    }
    manifest["checksum"] = _dataset_checksum(manifest)
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, directory / MANIFEST)
    return directory


def _dataset_checksum(manifest: dict) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(manifest["class_names"]).encode())
    h.update(json.dumps(manifest["grid"], sort_keys=True).encode())
    for e in manifest["samples"]:
        for k in sorted(e["sha256"]):
            h.update(e["sha256"][k].encode())
    return h.hexdigest()


class Dataset:
    """Read handle over a dataset directory. Samples are loaded lazily and
    verified against the manifest checksums."""

    def __init__(self, directory, verify: bool = True):
        self.directory = Path(directory)
        self.verify = verify
        path = self.directory / MANIFEST
        if not path.exists():
            raise DatasetError(f"no manifest in {self.directory}")
        try:
            m = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"corrupt manifest: {e}") from e
        version = m.get("format_version")
        if version != FORMAT_VERSION:
            raise DatasetError(f"unknown format version {version!r}")
        try:
            self.class_names = list(m["class_names"])
            self.static_ids = list(m["static_ids"])
            self.dynamic_ids = list(m["dynamic_ids"])
            self.grid = BevGridSpec.from_dict(m["grid"])
            self.splits = {k: list(v) for k, v in m["splits"].items()}
            self._entries = {e["id"]: e for e in m["samples"]}
            self.checksum = m["checksum"]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed manifest: {e}") from e
        self.manifest = m
        if _dataset_checksum(m) != self.checksum:
            raise DatasetError("manifest checksum mismatch")
        if sorted(self.static_ids + self.dynamic_ids) != list(range(len(self.class_names))):
            raise DatasetError("static/dynamic ids do not partition the class set")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def ids(self) -> list[str]:
        return list(self._entries)

    def intrinsics(self, sample_id: str) -> CameraIntrinsics:
        return CameraIntrinsics.from_dict(self._entries[sample_id]["intrinsics"])

    def split_sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def split(self, name: str) -> list[str]:
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return list(self.splits[name])

    def __len__(self) -> int:
        return len(self._entries)

    def _read(self, entry, key) -> np.ndarray:
        path = self.directory / entry["files"][key]
        if not path.exists():
            raise DatasetError(f"missing file {path.name}")
        if self.verify and _sha256(path) != entry["sha256"][key]:
            raise DatasetError(f"checksum mismatch for {path.name}")
        return np.array(Image.open(path))

    def load(self, sample_id: str) -> SampleRecord:
        if sample_id not in self._entries:
            raise DatasetError(f"unknown sample {sample_id!r}")
        e = self._entries[sample_id]
        fv = self._read(e, "fv")
        bev = self._read(e, "bev")
        valid = self._read(e, "valid")
        if int(bev.max(initial=0)) >> self.num_classes:
            raise DatasetError(
                f"sample {sample_id}: label bits beyond the {self.num_classes} declared classes"
            )
        if bev.shape != self.grid.shape or valid.shape != self.grid.shape:
            raise DatasetError(f"sample {sample_id}: label shape {bev.shape} != grid {self.grid.shape}")
        return SampleRecord(
            fv.astype(np.float32) / 255.0,
            decode_bitmask(bev, self.num_classes),
            valid.astype(np.uint8),
            CameraIntrinsics.from_dict(e["intrinsics"]),
            Scene.from_dict(e["scene"]),
            sample_id,
        )

    def load_split(self, name: str) -> list[SampleRecord]:
        return [self.load(i) for i in self.split(name)]


def read_dataset(directory, verify: bool = True) -> Dataset:
    return Dataset(directory, verify=verify)
