"""BEV renderings of predictions and ground truth.

Each cell shows the highest-index class whose probability exceeds 0.5; cells
with no such class get the background color and cells outside the validity
mask are black.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from ..synthworld import Dataset, DatasetError, read_dataset
from ..synthworld.scene import CLASS_CATALOGUE
from .config import ConfigError
from .train import DTYPES, predict, model_from_checkpoint

log = logging.getLogger(__name__)

BACKGROUND = (235, 235, 235)
INVALID = (0, 0, 0)


def palette(class_names) -> dict[str, tuple[int, int, int]]:
    return {n: tuple(CLASS_CATALOGUE[n]["color"]) for n in class_names}


def top_class_map(scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """(C, Z, W) scores -> (Z, W) index of the largest class with p > threshold, -1 if none."""
    above = np.asarray(scores) > threshold
    C = above.shape[0]
    # reversed argmax finds the last True along the class axis
    last = C - 1 - np.argmax(above[::-1], axis=0)
    return np.where(above.any(axis=0), last, -1)


def render_bev(scores: np.ndarray, validity: np.ndarray, colors) -> np.ndarray:
    """uint8 (Z, W, 3) image, row 0 = farthest depth so the camera sits at the bottom."""
    idx = top_class_map(scores)
    lut = np.array([BACKGROUND] + [tuple(c) for c in colors], dtype=np.uint8)
    img = lut[idx + 1]
    img[~np.asarray(validity).astype(bool)] = INVALID
    return img[::-1].copy()


def visualize(checkpoint, data, ids, out_dir, scale: int = 4) -> list[str]:
    """Writes ``<id>_fv.png``, ``<id>_pred.png``, ``<id>_gt.png`` per sample and
    ``palette.json``. Unknown ids are skipped with a warning; returns the ids written."""
    model, ck = model_from_checkpoint(checkpoint)
    ds = data if isinstance(data, Dataset) else read_dataset(data)
    if ck.header["class_names"] != ds.class_names:
        raise ConfigError("checkpoint class set differs from dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pal = palette(ds.class_names)
    colors = [pal[n] for n in ds.class_names]
    written = []
    for sid in ids:
        if sid not in ds.ids:
            log.warning("sample %s not in dataset, skipped", sid)
            continue
        try:
            s = ds.load(sid)
        except DatasetError as e:
            log.warning("sample %s unreadable (%s), skipped", sid, e)
            continue
        scores = predict(model, [s], dtype=DTYPES[ck.header.get("dtype", "float32")])[0]
        Image.fromarray((np.clip(s.fv_image, 0, 1) * 255).round().astype(np.uint8)).save(out / f"{sid}_fv.png")
        for tag, arr in (("pred", scores), ("gt", s.bev_labels.astype(float))):
            img = render_bev(arr, s.validity, colors)
            if scale > 1:
                img = np.kron(img, np.ones((scale, scale, 1), np.uint8))
            Image.fromarray(img).save(out / f"{sid}_{tag}.png")
        written.append(sid)
    manifest = {
        "classes": [{"index": i, "name": n, "color": list(pal[n])} for i, n in enumerate(ds.class_names)],
        "background": list(BACKGROUND),
        "invalid": list(INVALID),
        "rule": "largest class index with p > 0.5",
        "samples": written,
    }
    (out / "palette.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return written
