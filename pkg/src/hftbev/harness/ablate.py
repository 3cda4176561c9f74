"""Train and evaluate variants along one axis with shared data and seed."""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

from ..net import param_count
from ..synthworld import Dataset, read_dataset
from .config import ConfigError, RunConfig
from .train import Trainer, evaluate_samples

log = logging.getLogger(__name__)

AXES = ("mode", "scheme", "distance")
TEACHER_SCHEMES = ("cbft_teacher", "cfft_teacher", "output_sim", "subfeature_sim")


def variants(base: RunConfig, axis: str) -> list[tuple[str, dict]]:
    """(row name, dotted overrides) for every variant along ``axis``."""
    mls = base.scheme.scheme if base.scheme.scheme != "none" else "output_sim"
    if axis == "mode":
        return [
            ("cbft_only", {"model.mode": "cbft_only", "scheme.scheme": "none"}),
            ("cfft_only", {"model.mode": "cfft_only", "scheme.scheme": "none"}),
            ("hybrid_no_mls", {"model.mode": "hybrid", "scheme.scheme": "none"}),
            ("hybrid_mls", {"model.mode": "hybrid", "scheme.scheme": mls}),
        ]
    if axis == "scheme":
        return [(s, {"model.mode": "hybrid", "scheme.scheme": s}) for s in TEACHER_SCHEMES]
    if axis == "distance":
        return [(d, {"model.mode": "hybrid", "scheme.scheme": mls, "scheme.distance": d})
                for d in ("L1", "KL", "L2")]
    raise ConfigError(f"axis must be one of {AXES}, got {axis!r}")


def run_variant(cfg: RunConfig, ds: Dataset, name: str, out_dir: Path) -> dict:
    trainer = Trainer(cfg, ds)
    trainer.run(out_dir=out_dir)
    split = cfg.val_split if cfg.val_split and cfg.val_split in ds.splits else cfg.train_split
    rep = evaluate_samples(trainer.model, ds.load_split(split), ds.class_names, ds.static_ids,
                           ds.dynamic_ids, trainer.dtype)
    return {
        "variant": name,
        "mode": cfg.model.mode,
        "scheme": cfg.scheme.scheme,
        "distance": cfg.scheme.distance,
        "param_count": param_count(trainer.model)["total"],
        "per_class_iou": rep.per_class_iou,
        "miou": rep.miou,
        "map": rep.map,
        "iou_st": rep.iou_st,
        "iou_dy": rep.iou_dy,
        "bamiou": rep.bamiou,
        "eval_split": split,
        "seed": cfg.seed,
        "dataset_checksum": ds.checksum,
        "steps": trainer.step,
    }


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict], class_names: list[str]) -> str:
    header = ["variant", "params"] + [f"IoU:{c}" for c in class_names] + ["mIoU", "mAP", "BamIoU"]
    body = [[r["variant"], r["param_count"], *r["per_class_iou"], r["miou"], r["map"], r["bamiou"]]
            for r in rows]
    cells = [header] + [[_fmt(v) for v in row] for row in body]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(s.ljust(w) if i == 0 else s.rjust(w) for i, (s, w) in enumerate(zip(row, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def ablate(base: RunConfig, axis: str, out_dir) -> dict:
    """Runs every variant and writes ``ablation_<axis>.json`` / ``.txt``."""
    plan = variants(base, axis)
    ds = read_dataset(base.data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, overrides in plan:
        cfg = base.updated(**overrides)
        log.info("ablation %s: variant %s", axis, name)
        rows.append(run_variant(cfg, ds, name, out / name))
    result = {"axis": axis, "class_names": ds.class_names, "dataset_checksum": ds.checksum,
              "seed": base.seed, "rows": rows}
    text = format_table(rows, ds.class_names)
    (out / f"ablation_{axis}.json").write_text(json.dumps(_denan(result), indent=2, sort_keys=True) + "\n")
    (out / f"ablation_{axis}.txt").write_text(text)
    result["text"] = text
    return result


def _denan(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _denan(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_denan(v) for v in x]
    return x
