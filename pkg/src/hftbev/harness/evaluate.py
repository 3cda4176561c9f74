"""Full-split evaluation of a checkpoint."""
from __future__ import annotations

from pathlib import Path

from ..metrics import MetricReport
from ..synthworld import Dataset, DatasetError, read_dataset
from .config import ConfigError
from .train import DTYPES, evaluate_samples, model_from_checkpoint


def evaluate(checkpoint, data, split: str, report_path=None) -> MetricReport:
    """Evaluate ``checkpoint`` on one split of a dataset directory.

    Raises ConfigError when the checkpoint was trained on a different class
    set and DatasetError when the split is missing or empty.
    """
    model, ck = model_from_checkpoint(checkpoint)
    ds = data if isinstance(data, Dataset) else read_dataset(data)
    if ck.header["class_names"] != ds.class_names:
        raise ConfigError(
            f"checkpoint classes {ck.header['class_names']} differ from dataset classes {ds.class_names}"
        )
    if split not in ds.splits or not ds.split(split):
        raise DatasetError(f"split {split!r} is missing or empty")
    samples = ds.load_split(split)
    rep = evaluate_samples(model, samples, ds.class_names, ds.static_ids, ds.dynamic_ids,
                           DTYPES[ck.header.get("dtype", "float32")])
    rep.extra = {"split": split, "num_samples": len(samples), "dataset_checksum": ds.checksum,
                 "checkpoint_epoch": ck.header.get("epoch"), "checkpoint_step": ck.header.get("step")}
    if report_path is not None:
        p = Path(report_path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(rep.to_json() + "\n")
    return rep
