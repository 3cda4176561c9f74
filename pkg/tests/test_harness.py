import json
import math
import struct
from pathlib import Path

import numpy as np
import pytest
import torch

from hftbev.cli import main
from hftbev.geometry import default_grid, default_intrinsics
from hftbev.harness import train as train_mod
from hftbev.harness.ablate import format_table, variants
from hftbev.harness.checkpoint import (
    MAGIC,
    VERSION,
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from hftbev.harness.config import ConfigError, load_run_config, substream, substream_seed
from hftbev.harness.evaluate import evaluate
from hftbev.harness.params import additivity_residual, mode_counts
from hftbev.harness.train import Trainer, hflip, lr_at_epoch, model_from_checkpoint, to_batch
from hftbev.harness.visualize import BACKGROUND, INVALID, render_bev, top_class_map, visualize
from hftbev.losses import NonFiniteLossError
from hftbev.synthworld import SceneConfig, make_sample, read_dataset, render_bev_gt, sample_scene


# ---------------------------------------------------------------- config

def test_unknown_keys_rejected_everywhere():
    with pytest.raises(ConfigError):
        load_run_config({"epochz": 3})
    with pytest.raises(ConfigError):
        load_run_config({"optimizer": {"learning_rate": 1e-3}})
    with pytest.raises(ConfigError):
        load_run_config({"model": {"mode": "hybrid", "depth": 3}})


def test_config_invariants():
    with pytest.raises(ConfigError):
        load_run_config({"epochs": 20, "optimizer": {"decay_epochs": [22]}})
    with pytest.raises(ConfigError):
        load_run_config({"optimizer": {"lr": 0}})
    with pytest.raises(ConfigError):
        load_run_config({"model": {"mode": "cbft_only"}, "scheme": {"scheme": "output_sim"}})
    with pytest.raises(ConfigError):
        load_run_config({"scheme": {"distance": "cosine"}})


def test_defaults_and_overrides():
    cfg = load_run_config({})
    assert cfg.optimizer.lr == 2e-4 and cfg.epochs == 30 and cfg.batch_size == 8
    assert cfg.optimizer.decay_epochs == [22, 26] and cfg.optimizer.decay_factor == 0.1
    assert cfg.loss.lambda1 == 0.05 and cfg.loss.lambda2 == 0.01
    assert cfg.loss.alpha == 0.001 and cfg.loss.beta == 1.0
    c2 = cfg.updated(**{"model.mode": "cfft_only", "scheme.scheme": "none"})
    assert c2.model.mode == "cfft_only" and cfg.model.mode == "hybrid"


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(p)


def test_substreams_are_independent_and_reproducible():
    a = substream(5, "data_order", 0).random(4)
    assert np.array_equal(a, substream(5, "data_order", 0).random(4))
    assert not np.array_equal(a, substream(5, "augment", 0).random(4))
    assert not np.array_equal(a, substream(5, "data_order", 1).random(4))
    assert substream_seed(5, "init") == substream_seed(5, "init") != substream_seed(6, "init")


def test_step_decay_is_exact():
    cfg = load_run_config({"epochs": 10, "optimizer": {"lr": 3e-4, "decay_epochs": [4, 7], "decay_factor": 0.1}})
    lrs = [lr_at_epoch(cfg, e) for e in range(10)]
    assert lrs[0] == 3e-4
    assert lrs[4] == lrs[3] * 0.1 and lrs[7] == lrs[6] * 0.1
    assert len(set(lrs)) == 3


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_and_layout(tmp_path):
    tensors = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1.5, -2.0]),
        "c": np.array([[7]], dtype=np.int64),
        "d": np.zeros((0,), np.uint8),
        "e": np.float32(3.0).reshape(()),
    }
    p = save_checkpoint(Checkpoint({"epoch": 2, "note": "x"}, tensors), tmp_path / "c.ckpt")
    raw = p.read_bytes()
    assert raw[:4] == MAGIC == b"HFTC"
    assert struct.unpack_from("<H", raw, 4)[0] == VERSION
    ck = load_checkpoint(p)
    assert ck.header == {"epoch": 2, "note": "x"}
    for k, v in tensors.items():
        assert ck.tensors[k].dtype == v.dtype and np.array_equal(ck.tensors[k], v)
    # big-endian input is stored little-endian
    save_checkpoint(Checkpoint({}, {"x": np.array([1.0, 2.0], dtype=">f8")}), tmp_path / "be.ckpt")
    assert load_checkpoint(tmp_path / "be.ckpt").tensors["x"].tolist() == [1.0, 2.0]


def test_checkpoint_rejects_bad_files(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    good = save_checkpoint(Checkpoint({}, {"a": np.ones(100)}), tmp_path / "g.ckpt").read_bytes()
    p.write_bytes(good[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(good[:4] + struct.pack("<H", 99) + good[6:])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_reload_reproduces_forward_bit_exactly(tiny_run, dtype):
    tiny_run.update(dtype=dtype, epochs=1, optimizer={"decay_epochs": []})
    cfg = load_run_config(tiny_run)
    tr = Trainer(cfg)
    res = tr.run()
    model, _ = model_from_checkpoint(res.last_checkpoint)
    batch = to_batch(tr.val_set, tr.dtype)
    tr.model.eval()
    with torch.no_grad():
        a = tr.model(batch.images, batch.intrinsics)
        b = model(batch.images, batch.intrinsics)
    assert torch.equal(a.scores, b.scores)
    assert torch.equal(a.branch_scores["geo"], b.branch_scores["geo"])


# ---------------------------------------------------------------- training

def test_identical_reruns_give_identical_logs(tiny_run):
    cfg = load_run_config(tiny_run)
    a = Trainer(cfg).run(out_dir=tiny_run["out"] + "_a")
    b = Trainer(cfg).run(out_dir=tiny_run["out"] + "_b")
    assert a.log == b.log
    assert (a.out_dir / "train_log.jsonl").read_text() == (b.out_dir / "train_log.jsonl").read_text()


def test_resume_matches_uninterrupted_run(tiny_run):
    tiny_run.update(dtype="float64")
    cfg = load_run_config(tiny_run)
    full = Trainer(cfg)
    full.run(out_dir=tiny_run["out"] + "_full")
    part = Trainer(cfg)
    r1 = part.run(until_epoch=1, out_dir=tiny_run["out"] + "_part")
    resumed = Trainer(cfg, resume=r1.last_checkpoint)
    resumed.run(out_dir=tiny_run["out"] + "_resumed")
    assert resumed.step == full.step
    for (k, a), (_, b) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
        assert torch.equal(a, b), k
    assert [r["total"] for r in full.log[len(part.log):]] == [r["total"] for r in resumed.log]


def test_gradient_clipping_bound(tiny_run):
    tiny_run["optimizer"]["clip_norm"] = 0.05
    res = Trainer(load_run_config(tiny_run)).run()
    assert any(r["grad_norm"] > 0.05 for r in res.log)
    assert all(r["grad_norm_clipped"] <= 0.05 + 1e-6 for r in res.log)


def test_recorded_lr_follows_decay(tiny_run):
    res = Trainer(load_run_config(tiny_run)).run()
    lrs = [e["lr"] for e in res.epoch_log]
    assert lrs[1] == lrs[0] * 0.1 and lrs[2] == lrs[1] * 0.1
    assert (res.out_dir / "best.ckpt").exists() and (res.out_dir / "last.ckpt").exists()


def test_beta_zero_equals_scheme_none(tiny_run):
    tiny_run.update(epochs=1, optimizer={"decay_epochs": []}, dtype="float64")
    a = Trainer(load_run_config({**tiny_run, "scheme": {"scheme": "none"}}))
    a.run()
    b = Trainer(load_run_config({**tiny_run, "scheme": {"scheme": "output_sim"}, "loss": {"beta": 0.0}}))
    b.run(out_dir=tiny_run["out"] + "_b")
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)


def test_nonfinite_loss_aborts_with_dump(tiny_run, monkeypatch):
    def poisoned(*args, **kw):
        raise NonFiniteLossError("semantic loss is not finite: nan")

    monkeypatch.setattr(train_mod, "hft_loss", poisoned)
    with pytest.raises(NonFiniteLossError):
        Trainer(load_run_config(tiny_run)).run()
    dump = json.loads((Path(tiny_run["out"]) / "nonfinite_batch.json").read_text())
    assert dump["step"] == 0 and len(dump["ids"]) == 3


def test_class_count_mismatch_is_config_error(tiny_run):
    tiny_run["loss"] = {"class_weights": [1.0, 1.0]}
    with pytest.raises(ConfigError):
        Trainer(load_run_config(tiny_run))


def test_hflip_mirrors_labels_consistently():
    cfg = SceneConfig(elevated_prob=0.3)
    s = make_sample(21, cfg)
    f = hflip(s)
    assert np.array_equal(hflip(f).bev_labels, s.bev_labels)
    assert f.intrinsics.cx == s.intrinsics.image_w - s.intrinsics.cx
    mirrored = sample_scene(21, cfg, default_grid())
    for g in mirrored.ground:
        g.polygon = [(-x, z) for x, z in g.polygon]
    for b in mirrored.boxes:
        b.x = -b.x
    labels, valid = render_bev_gt(mirrored, default_grid(), f.intrinsics, 4)
    assert np.array_equal(valid, f.validity)
    agree = (labels == f.bev_labels).mean()
    assert agree > 0.999


# ---------------------------------------------------------------- evaluate / viz / ablate / params

@pytest.fixture
def trained(tiny_run):
    tiny_run.update(epochs=1, optimizer={"decay_epochs": []})
    return Trainer(load_run_config(tiny_run)).run()


def test_evaluate_is_byte_identical(trained, tiny_data, tmp_path):
    evaluate(trained.last_checkpoint, tiny_data, "val", tmp_path / "a.json")
    evaluate(trained.last_checkpoint, tiny_data, "val", tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    rep = json.loads((tmp_path / "a.json").read_text())
    assert rep["extra"]["num_samples"] == 3 and len(rep["per_class_iou"]) == 4


def test_evaluate_rejects_other_class_set(trained, tmp_path):
    from hftbev.harness.config import load_gen_config
    from hftbev.harness.gendata import generate_dataset
    from tests.conftest import TINY_GEN

    other = generate_dataset(load_gen_config({**TINY_GEN, "scene": {"class_names": ["drivable", "vehicle"]}}),
                             tmp_path / "other", seed=1)
    with pytest.raises(ConfigError):
        evaluate(trained.last_checkpoint, other, "val")


def test_top_class_rule():
    scores = np.zeros((3, 1, 4))
    scores[1, 0, 0], scores[2, 0, 0] = 0.6, 0.7  # two classes above threshold
    scores[0, 0, 1] = 0.9
    scores[:, 0, 2] = 0.5  # exactly 0.5 is not occupied
    scores[2, 0, 3] = 0.99
    assert top_class_map(scores).tolist() == [[2, 0, -1, 2]]
    colors = [(10, 10, 10), (20, 20, 20), (30, 30, 30)]
    valid = np.array([[1, 1, 1, 0]])
    img = render_bev(scores, valid, colors)[0]
    assert tuple(img[0]) == colors[2] and tuple(img[1]) == colors[0]
    assert tuple(img[2]) == BACKGROUND and tuple(img[3]) == INVALID


def test_visualize_writes_files_and_skips_missing(trained, tiny_data, tmp_path):
    done = visualize(trained.last_checkpoint, tiny_data, ["00000", "nope"], tmp_path / "viz")
    assert done == ["00000"]
    for tag in ("fv", "pred", "gt"):
        assert (tmp_path / "viz" / f"00000_{tag}.png").exists()
    manifest = json.loads((tmp_path / "viz" / "palette.json").read_text())
    assert [c["name"] for c in manifest["classes"]] == ["drivable", "walkway", "vehicle", "pedestrian"]


def test_ablation_variants():
    base = load_run_config({})
    assert [n for n, _ in variants(base, "mode")] == ["cbft_only", "cfft_only", "hybrid_no_mls", "hybrid_mls"]
    assert [n for n, _ in variants(base, "distance")] == ["L1", "KL", "L2"]
    assert [n for n, _ in variants(base, "scheme")] == ["cbft_teacher", "cfft_teacher", "output_sim", "subfeature_sim"]
    with pytest.raises(ConfigError):
        variants(base, "optimizer")
    for _, ov in variants(base, "mode"):
        base.updated(**ov)  # every variant is a valid config


def test_ablation_run_shares_provenance(tiny_run, tmp_path):
    from hftbev.harness.ablate import ablate

    tiny_run.update(epochs=1, optimizer={"decay_epochs": []}, max_steps=1)
    res = ablate(load_run_config(tiny_run), "distance", tmp_path / "abl")
    assert [r["variant"] for r in res["rows"]] == ["L1", "KL", "L2"]
    assert len({r["dataset_checksum"] for r in res["rows"]}) == 1
    assert len({r["param_count"] for r in res["rows"]}) == 1
    saved = json.loads((tmp_path / "abl" / "ablation_distance.json").read_text())
    assert len(saved["rows"]) == 3
    text = (tmp_path / "abl" / "ablation_distance.txt").read_text().splitlines()
    assert len({len(line) for line in text if line}) == 1  # aligned columns


def test_format_table_handles_nan():
    row = {"variant": "x", "param_count": 10, "per_class_iou": [0.5, math.nan], "miou": 0.5, "map": 0.4,
           "bamiou": 0.9}
    assert "-" in format_table([row], ["a", "b"]).splitlines()[2]


def test_params_additivity(tiny_run):
    counts = mode_counts(load_run_config(tiny_run))
    assert additivity_residual(counts) == 0
    assert counts["hybrid"]["total"] > max(counts["cbft_only"]["total"], counts["cfft_only"]["total"])
    default = mode_counts(load_run_config({}))
    assert additivity_residual(default) == 0


# ---------------------------------------------------------------- CLI

def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def test_cli_exit_codes(tiny_run, tiny_data, tmp_path, capsys, monkeypatch):
    good = _write(tmp_path / "run.json", {**tiny_run, "epochs": 1, "optimizer": {"decay_epochs": []}})
    assert main(["params", "--config", good]) == 0
    assert "exact" in capsys.readouterr().out
    assert main(["params", "--config", _write(tmp_path / "bad.json", {"nope": 1})]) == 2
    assert main(["train", "--config", good, "--out", str(tmp_path / "r")]) == 0
    ck = str(tmp_path / "r" / "last.ckpt")
    assert main(["eval", "--checkpoint", ck, "--data", str(tiny_data), "--split", "val",
                 "--report", str(tmp_path / "rep.json")]) == 0
    assert main(["eval", "--checkpoint", ck, "--data", str(tiny_data), "--split", "test",
                 "--report", str(tmp_path / "rep.json")]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tiny_data),
                 "--split", "val", "--report", str(tmp_path / "rep.json")]) == 3
    assert main(["viz", "--checkpoint", ck, "--data", str(tiny_data), "--ids", "00001,zz",
                 "--out", str(tmp_path / "v")]) == 0
    assert main(["train", "--config", _write(tmp_path / "nodata.json", {**tiny_run, "data": str(tmp_path / "void")}),
                 "--out", str(tmp_path / "x")]) == 3
    assert main(["ablate", "--config", good, "--axis", "colour", "--out", str(tmp_path / "a")]) == 2
    assert main(["gen-data", "--config", _write(tmp_path / "g.json", {"splits": "train:2", "scene": {"class_names": ["ufo"]}}),
                 "--out", str(tmp_path / "g"), "--seed", "0"]) == 2

    def boom(*a, **k):
        raise NonFiniteLossError("loss is not finite")

    monkeypatch.setattr(train_mod, "hft_loss", boom)
    assert main(["train", "--config", good, "--out", str(tmp_path / "nan")]) == 4


def test_cli_gen_data(tmp_path):
    from tests.conftest import TINY_GEN

    cfg = _write(tmp_path / "g.json", {**TINY_GEN, "splits": "train:2,val:1"})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "4"]) == 0
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
    assert read_dataset(tmp_path / "a").checksum == read_dataset(tmp_path / "b").checksum
    assert read_dataset(tmp_path / "a").split_sizes() == {"train": 2, "val": 1}
