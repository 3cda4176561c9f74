"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .geometry import GeometryError
from .harness.checkpoint import CheckpointError
from .harness.config import ConfigError, load_gen_config, load_run_config
from .losses import LossConfigError, NonFiniteLossError
from .net import ModelConfigError
from .synthworld import DatasetError, SceneConfigError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("hftbev")


def _gen_data(args) -> int:
    from .harness.gendata import generate_dataset

    cfg = load_gen_config(args.config)
    path = generate_dataset(cfg, args.out, args.seed)
    print(f"wrote dataset to {path}")
    return EXIT_OK


def _train(args) -> int:
    from .harness.train import train

    cfg = load_run_config(args.config)
    if args.out:
        cfg = cfg.updated(out=args.out)
    res = train(cfg)
    print(json.dumps({"out": str(res.out_dir), "steps": len(res.log), "best_val_miou": res.best_miou}))
    return EXIT_OK


def _eval(args) -> int:
    from .harness.evaluate import evaluate

    rep = evaluate(args.checkpoint, args.data, args.split, args.report)
    print(f"mIoU {rep.miou:.4f}  mAP {rep.map:.4f}  BamIoU {rep.bamiou:.4f}  -> {args.report}")
    return EXIT_OK


def _ablate(args) -> int:
    from .harness.ablate import ablate

    cfg = load_run_config(args.config)
    res = ablate(cfg, args.axis, args.out)
    print(res["text"], end="")
    return EXIT_OK


def _viz(args) -> int:
    from .harness.visualize import visualize

    ids = [s.strip() for s in args.ids.split(",") if s.strip()]
    written = visualize(args.checkpoint, args.data, ids, args.out)
    print(f"rendered {len(written)} of {len(ids)} samples into {args.out}")
    return EXIT_OK


def _params(args) -> int:
    from .harness.params import format_counts, mode_counts

    print(format_counts(mode_counts(load_run_config(args.config))), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hftbev", description="Monocular BEV segmentation with hybrid view transformation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=_gen_data)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=_eval)

    s = sub.add_parser("ablate", help="train and compare variants along one axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=["scheme", "distance", "mode"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=_ablate)

    s = sub.add_parser("viz", help="render predictions and ground truth")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--ids", required=True, help="comma-separated sample ids")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_viz)

    s = sub.add_parser("params", help="print parameter counts per mode")
    s.add_argument("--config", required=True)
    s.set_defaults(func=_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SceneConfigError, ModelConfigError, LossConfigError, GeometryError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
