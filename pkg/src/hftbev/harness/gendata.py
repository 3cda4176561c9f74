"""Dataset generation from a JSON generation config."""
from __future__ import annotations

from pathlib import Path

from ..synthworld import generate_samples, write_dataset
from .config import GenConfig


def split_total(splits: str) -> int:
    return sum(int(part.partition(":")[2]) for part in splits.split(","))


def generate_dataset(cfg: GenConfig, out_dir, seed: int) -> Path:
    scene, grid, intr = cfg.scene.build(), cfg.grid.build(), cfg.intrinsics.build()
    n = split_total(cfg.splits)
    samples = generate_samples(n, seed, scene, grid, intr, cfg.focal_jitter)
    return write_dataset(samples, out_dir, grid, scene, cfg.splits, seed)
