"""Training loop with step decay, gradient clipping, validation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..geometry import CameraIntrinsics
from ..losses import LossBreakdown, NonFiniteLossError, compute_class_weights, hft_loss
from ..metrics import MetricAccumulator, MetricReport
from ..net import HFTNet, ModelConfig, build_model
from ..synthworld import Dataset, DatasetError, SampleRecord, read_dataset
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_model_arrays,
    load_optimizer_arrays,
    save_checkpoint,
    state_to_arrays,
)
from .config import ConfigError, RunConfig, substream, substream_seed

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, H, W)
    labels: torch.Tensor  # (B, C, Z, W)
    valid: torch.Tensor  # (B, Z, W)
    intrinsics: list[CameraIntrinsics]
    ids: list[str]


def to_batch(samples: list[SampleRecord], dtype=torch.float32) -> Batch:
    img = np.stack([s.fv_image for s in samples]).transpose(0, 3, 1, 2) - 0.5
    return Batch(
        torch.as_tensor(img, dtype=dtype),
        torch.as_tensor(np.stack([s.bev_labels for s in samples]), dtype=dtype),
        torch.as_tensor(np.stack([s.validity for s in samples]), dtype=dtype),
        [s.intrinsics for s in samples],
        [s.sample_id for s in samples],
    )


def hflip(sample: SampleRecord) -> SampleRecord:
    """Mirror the image and the BEV maps about the optical axis."""
    intr = sample.intrinsics
    flipped = CameraIntrinsics(intr.fx, intr.fy, intr.image_w - intr.cx, intr.cy,
                               intr.cam_height, intr.image_w, intr.image_h)
    return SampleRecord(
        np.ascontiguousarray(sample.fv_image[:, ::-1]),
        np.ascontiguousarray(sample.bev_labels[:, :, ::-1]),
        np.ascontiguousarray(sample.validity[:, ::-1]),
        flipped, sample.scene, sample.sample_id,
    )


def photometric(sample: SampleRecord, rng: np.random.Generator) -> SampleRecord:
    b, c = rng.uniform(-0.1, 0.1), rng.uniform(0.8, 1.2)
    img = np.clip((sample.fv_image - 0.5) * c + 0.5 + b, 0, 1).astype(np.float32)
    return SampleRecord(img, sample.bev_labels, sample.validity, sample.intrinsics, sample.scene, sample.sample_id)


def label_frequencies(samples: list[SampleRecord]) -> list[float]:
    pos = sum(s.bev_labels.reshape(s.bev_labels.shape[0], -1)[:, s.validity.reshape(-1) > 0].sum(1) for s in samples)
    cells = sum(int(s.validity.sum()) for s in samples)
    return (np.asarray(pos, dtype=float) / max(cells, 1)).tolist()


def lr_at_epoch(cfg: RunConfig, epoch: int) -> float:
    lr = cfg.optimizer.lr
    # repeated multiplication so consecutive rates differ by exactly the factor
    for e in sorted(cfg.optimizer.decay_epochs):
        if epoch >= e:
            lr = lr * cfg.optimizer.decay_factor
    return lr


def make_optimizer(cfg: RunConfig, model: torch.nn.Module):
    return torch.optim.AdamW(model.parameters(), lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay)


@torch.no_grad()
def predict(model: HFTNet, samples: list[SampleRecord], batch_size: int = 16, dtype=torch.float32) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        b = to_batch(samples[i:i + batch_size], dtype)
        out.append(model(b.images, b.intrinsics).scores.double().numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_samples(model, samples, class_names, static_ids, dynamic_ids, dtype=torch.float32) -> MetricReport:
    acc = MetricAccumulator(class_names, static_ids, dynamic_ids)
    for i in range(0, len(samples), 16):
        chunk = samples[i:i + 16]
        scores = predict(model, chunk, dtype=dtype)
        acc.update(scores, np.stack([s.bev_labels for s in chunk]), np.stack([s.validity for s in chunk]))
    return acc.report()


@dataclass
class TrainResult:
    out_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path | None
    best_miou: float
    log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)
    model: HFTNet | None = None


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Dataset | None = None, resume: str | Path | None = None):
        self.cfg = cfg
        self.dtype = DTYPES[cfg.dtype]
        self.ds = dataset or read_dataset(cfg.data)
        if cfg.grid is not None and cfg.grid.build() != self.ds.grid:
            raise ConfigError("config grid does not match the dataset grid")
        self.train_set = self.ds.load_split(cfg.train_split)
        self.val_set = self.ds.load_split(cfg.val_split) if cfg.val_split and cfg.val_split in self.ds.splits else []
        if not self.train_set:
            raise DatasetError(f"split {cfg.train_split!r} is empty")
        ref = self.train_set[0].intrinsics
        self.model_cfg = cfg.build_model_config(self.ds.num_classes, self.ds.grid, ref)
        self.class_weights = self._class_weights()
        self.lw = cfg.loss_weights(self.class_weights)
        self.scheme = cfg.scheme_config()
        torch.use_deterministic_algorithms(True)
        self.model = build_model(self.model_cfg, seed=substream_seed(cfg.seed, "init"), dtype=self.dtype)
        self.opt = make_optimizer(cfg, self.model)
        self.epoch = 0
        self.step = 0
        self.best_miou = -math.inf
        self.log: list[dict] = []
        self.epoch_log: list[dict] = []
        if resume is not None:
            self._resume(resume)

    def _class_weights(self) -> list[float]:
        if self.cfg.loss.class_weights is not None:
            if len(self.cfg.loss.class_weights) != self.ds.num_classes:
                raise ConfigError(
                    f"{len(self.cfg.loss.class_weights)} class weights for {self.ds.num_classes} classes"
                )
            return list(self.cfg.loss.class_weights)
        norm = None if self.cfg.loss.class_weight_norm == "none" else self.cfg.loss.class_weight_norm
        return compute_class_weights(label_frequencies(self.train_set), norm, self.cfg.loss.class_weight_cap)

    def _resume(self, path):
        ck = load_checkpoint(path)
        if ck.header["class_names"] != self.ds.class_names:
            raise ConfigError("checkpoint class set differs from dataset")
        load_model_arrays(self.model, ck.tensors)
        load_optimizer_arrays(self.opt, ck.tensors)
        torch.set_rng_state(torch.from_numpy(ck.tensors["rng/torch"].copy()))
        self.epoch = ck.header["epoch"]
        self.step = ck.header["step"]
        self.best_miou = ck.header.get("best_miou", -math.inf) or -math.inf
        self.class_weights = ck.header["class_weights"]
        self.lw = self.cfg.loss_weights(self.class_weights)

    def _epoch_batches(self, epoch: int):
        order = substream(self.cfg.seed, "data_order", epoch).permutation(len(self.train_set))
        aug = substream(self.cfg.seed, "augment", epoch)
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            chunk = []
            for i in order[start:start + bs]:
                s = self.train_set[i]
                if aug.random() < self.cfg.augment.hflip:
                    s = hflip(s)
                if self.cfg.augment.photometric:
                    s = photometric(s, aug)
                chunk.append(s)
            yield to_batch(chunk, self.dtype)

    def train_step(self, batch: Batch) -> tuple[LossBreakdown, float, float]:
        self.model.train()
        out = self.model(batch.images, batch.intrinsics)
        losses = hft_loss(out, batch.labels, batch.valid, self.lw, self.scheme, self.model_cfg.grid)
        self.opt.zero_grad(set_to_none=True)
        losses.total.backward()
        pre = float(torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.optimizer.clip_norm))
        post = float(torch.sqrt(sum((p.grad.double() ** 2).sum() for p in self.model.parameters() if p.grad is not None)))
        self.opt.step()
        return losses, pre, post

    def checkpoint(self) -> Checkpoint:
        header = {
            "format": "HFTC",
            "config": self.cfg.model_dump(),
            "model_config": self.model_cfg.to_dict(),
            "class_names": self.ds.class_names,
            "static_ids": self.ds.static_ids,
            "dynamic_ids": self.ds.dynamic_ids,
            "class_weights": self.class_weights,
            "dataset_checksum": self.ds.checksum,
            "epoch": self.epoch,
            "step": self.step,
            "best_miou": None if self.best_miou == -math.inf else self.best_miou,
            "dtype": self.cfg.dtype,
        }
        return Checkpoint(header, state_to_arrays(self.model, self.opt))

    def run(self, until_epoch: int | None = None, out_dir=None) -> TrainResult:
        cfg = self.cfg
        out = Path(out_dir or cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        last = out / "last.ckpt"
        best = out / "best.ckpt"
        stop_epoch = min(until_epoch or cfg.epochs, cfg.epochs)
        done = False
        while self.epoch < stop_epoch and not done:
            lr = lr_at_epoch(cfg, self.epoch)
            for g in self.opt.param_groups:
                g["lr"] = lr
            t0 = time.time()
            for bi, batch in enumerate(self._epoch_batches(self.epoch)):
                try:
                    losses, pre, post = self.train_step(batch)
                except NonFiniteLossError as e:
                    dump = out / "nonfinite_batch.json"
                    dump.write_text(json.dumps({"epoch": self.epoch, "step": self.step, "batch": bi,
                                                "ids": batch.ids, "error": str(e)}, indent=1))
                    raise NonFiniteLossError(f"{e} (epoch {self.epoch}, batch {bi}, ids {batch.ids})") from e
                rec = {"epoch": self.epoch, "step": self.step, "lr": lr, "grad_norm": pre,
                       "grad_norm_clipped": post, **losses.as_floats(), **losses.extras}
                self.log.append(rec)
                self.step += 1
                if self.step % cfg.log_every == 0:
                    log.debug("step %d %s", self.step, rec)
                if cfg.max_steps is not None and self.step >= cfg.max_steps:
                    done = True
                    break
            self.epoch += 1
            ep = {"epoch": self.epoch, "lr": lr, "seconds": time.time() - t0,
                  "train_loss": float(np.mean([r["total"] for r in self.log if r["epoch"] == self.epoch - 1]))}
            if self.val_set:
                rep = evaluate_samples(self.model, self.val_set, self.ds.class_names, self.ds.static_ids,
                                       self.ds.dynamic_ids, self.dtype)
                ep["val_miou"] = rep.miou
                ep["val_per_class_iou"] = rep.per_class_iou
                if rep.miou > self.best_miou:
                    self.best_miou = rep.miou
                    save_checkpoint(self.checkpoint(), best)
            self.epoch_log.append(ep)
            log.info("epoch %d: %s", self.epoch, {k: v for k, v in ep.items() if k != "val_per_class_iou"})
            save_checkpoint(self.checkpoint(), last)
        with open(out / "train_log.jsonl", "w") as f:
            for r in self.log:
                f.write(json.dumps(r) + "\n")
        (out / "epochs.json").write_text(json.dumps(self.epoch_log, indent=1))
        return TrainResult(out, last, best if best.exists() else None,
                           self.best_miou, self.log, self.epoch_log, self.model)


def train(cfg: RunConfig, dataset: Dataset | None = None, resume=None, until_epoch=None, out_dir=None) -> TrainResult:
    return Trainer(cfg, dataset, resume).run(until_epoch, out_dir)


def model_from_checkpoint(path_or_ckpt) -> tuple[HFTNet, Checkpoint]:
    ck = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt)
    mcfg = ModelConfig.from_dict(ck.header["model_config"])
    model = build_model(mcfg, dtype=DTYPES[ck.header.get("dtype", "float32")])
    load_model_arrays(model, ck.tensors)
    model.eval()
    return model, ck
