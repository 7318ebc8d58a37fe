"""Command-line entry point.

Subcommands: ``synth`` (dataset generation), ``train`` / ``finetune``
(protocol runs), ``eval`` (score a checkpoint), ``gradcheck`` (finite
difference verification) and ``dump`` (feature-map extraction).

Settings come from an optional JSON config file (sections ``synth``,
``model``, ``train``, ``protocol``) overlaid with command-line flags; every
run writes the fully resolved configuration beside its outputs.  Exit
codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import checkpoint as ckpt
from .data import (
    LENS_CLASSES,
    AugmentConfig,
    ProtocolSpec,
    RelabelPolicy,
    SynthConfig,
    load_manifest,
    synth_generate,
)
from .errors import CheckpointError, DataError, NumericError
from .gradcheck import format_table, run_suite
from .layers import INFER
from .metrics import format_report
from .model import build_model, config_from_dict, config_to_dict, dump_feature_maps
from .tensor import Tensor
from .training import ArrayDataset, TrainConfig, evaluate, run_protocol


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config_file(path) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")


def _write_resolved(out_dir, resolved: dict):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _override(base: dict, updates: dict) -> dict:
    out = dict(base)
    for k, v in updates.items():
        if v is not None:
            out[k] = v
    return out


# -- synth ----------------------------------------------------------------


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config).get("synth", {})
    cfg_dict = _override(asdict(SynthConfig()), file_cfg)
    cfg_dict = _override(cfg_dict, {"seed": args.seed, "image_size": args.size})
    if args.sensors:
        cfg_dict["sensors"] = args.sensors.split(",")
    cfg_dict["sensors"] = tuple(cfg_dict["sensors"])
    cfg_dict["ring_freqs"] = tuple(cfg_dict["ring_freqs"])
    cfg = SynthConfig(**cfg_dict)
    if args.counts:
        parts = args.counts.split(",")
        if len(parts) != len(LENS_CLASSES):
            raise UsageError(
                f"--counts needs {len(LENS_CLASSES)} comma-separated integers "
                f"({','.join(LENS_CLASSES)})")
        counts = {c: int(v) for c, v in zip(LENS_CLASSES, parts)}
    else:
        counts = file_cfg.get("counts") or {c: 20 for c in LENS_CLASSES}
    if sum(counts.values()) == 0:
        raise UsageError("--counts adds up to zero images; give at least one positive count")
    manifest = synth_generate(cfg, counts, args.out)
    resolved = {"synth": {**asdict(cfg), "sensors": list(cfg.sensors),
                          "ring_freqs": list(cfg.ring_freqs), "counts": counts}}
    _write_resolved(args.out, resolved)
    print(f"wrote {manifest}")
    return 0


# -- train / finetune --------------------------------------------------------


def _train_config(file_cfg: dict, args) -> TrainConfig:
    d = _override({
        "epochs": 10, "batch_size": 32, "lr": 1e-4, "betas": (0.9, 0.999),
        "seed": 0, "val_fraction": 0.1, "threshold": 0.5, "eval_batch": 64,
    }, file_cfg.get("train", {}))
    d = _override(d, {"epochs": args.epochs, "batch_size": args.batch,
                      "lr": args.lr, "seed": args.seed})
    aug = d.pop("augment", None)
    d["betas"] = tuple(d["betas"])
    cfg = TrainConfig(**d)
    shift = args.shift if args.shift is not None else (aug or {}).get("shift_fraction", 0.1)
    shear = args.shear if args.shear is not None else (aug or {}).get("shear_degrees", 10.0)
    if shift or shear:
        cfg.augment = AugmentConfig(shift_fraction=shift, shear_degrees=shear, seed=cfg.seed)
    return cfg


def _model_config(file_cfg: dict, args, seed: int):
    d = dict(file_cfg.get("model", {}))
    d.setdefault("seed", seed)
    if args.image_size is not None:
        d["input_size"] = args.image_size
    ablate = args.ablate or "none"
    if ablate not in ("none", "no-ifcnet", "no-cam", "backbone-only"):
        raise UsageError(f"unknown --ablate value {ablate!r}")
    if ablate in ("no-ifcnet", "backbone-only"):
        d["use_ifcnet"] = False
    if ablate in ("no-cam", "backbone-only"):
        d["use_cam"] = False
    return config_from_dict(d)


def _protocol_spec(file_cfg: dict, args, checkpoint=None) -> ProtocolSpec:
    d = dict(file_cfg.get("protocol", {}))
    if args.protocol:
        d["kind"] = args.protocol
    if "kind" not in d:
        raise UsageError("no protocol given (use --protocol or the config file)")
    if args.train_sensors:
        d["train_sensors"] = tuple(args.train_sensors.split(","))
    if args.test_sensors:
        d["test_sensors"] = tuple(args.test_sensors.split(","))
    if args.soft_lens_as:
        d["soft_lens_as"] = args.soft_lens_as
    if args.subsample is not None:
        d["test_subsample"] = args.subsample
    if checkpoint:
        d["checkpoint"] = checkpoint
    d.setdefault("split_seed", args.seed if args.seed is not None else 0)
    try:
        return ProtocolSpec(**d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))


def _write_split_manifest(path, train_rows, test_rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "lens_class", "sensor", "dataset", "split"])
        for split, rows in (("train", train_rows), ("test", test_rows)):
            for r in rows:
                writer.writerow([os.path.abspath(r.path), r.lens_class, r.sensor, r.dataset, split])


def _run_training(args, checkpoint=None) -> int:
    file_cfg = _load_config_file(args.config)
    train_cfg = _train_config(file_cfg, args)
    model_cfg = _model_config(file_cfg, args, train_cfg.seed)
    spec = _protocol_spec(file_cfg, args, checkpoint)
    records = load_manifest(args.manifest, spec.policy())
    if spec.kind == "lens_detection":
        present = tuple(c for c in LENS_CLASSES if any(r.lens_class == c for r in records))
        model_cfg.num_classes = len(present)

    resolved = {
        "manifest": os.path.abspath(args.manifest),
        "model": config_to_dict(model_cfg),
        "train": {**asdict(train_cfg),
                  "augment": asdict(train_cfg.augment) if train_cfg.augment else None,
                  "betas": list(train_cfg.betas)},
        "protocol": {**asdict(spec), "train_sensors": list(spec.train_sensors),
                     "test_sensors": list(spec.test_sensors)},
    }
    _write_resolved(args.out, resolved)
    result = run_protocol(spec, records, model_cfg, train_cfg, args.out)
    _write_split_manifest(os.path.join(args.out, "splits.csv"),
                          result.train_rows, result.test_rows)
    r = result.report
    print(f"protocol={spec.kind} ifcnet={'on' if model_cfg.use_ifcnet else 'off'} "
          f"cam={'on' if model_cfg.use_cam else 'off'} params={_param_count(result)}")
    print(f"aa={r.aa:.2f} apcer={_fmt(r.apcer)} npcer={_fmt(r.npcer)} "
          f"acer={_fmt(r.acer)} eer={_fmt(r.eer)}")
    print(f"report={result.report_path}")
    return 0


def _param_count(result):
    entries = ckpt.load_entries(result.checkpoint_path)
    return sum(v.size for k, v in entries.items() if not k.startswith("optim."))


def _fmt(v):
    return "undefined" if v is None else f"{v:.2f}"


def cmd_train(args) -> int:
    checkpoint = getattr(args, "from_checkpoint", None)
    if args.protocol == "incremental" and not checkpoint:
        raise UsageError("--protocol incremental requires --from-checkpoint")
    return _run_training(args, checkpoint)


def cmd_finetune(args) -> int:
    if not args.from_checkpoint:
        raise UsageError("finetune requires --from-checkpoint")
    if not args.protocol:
        args.protocol = "incremental"
    return _run_training(args, args.from_checkpoint)


# -- eval -----------------------------------------------------------------------


def _model_from_run(checkpoint_path, config_path):
    if config_path is None:
        config_path = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)),
                                   "resolved_config.json")
    cfg_dict = _load_config_file(config_path).get("model")
    if cfg_dict is None:
        raise UsageError(f"{config_path} has no 'model' section; pass --config explicitly")
    model = build_model(config_from_dict(cfg_dict))
    entries = ckpt.load_entries(checkpoint_path)
    ckpt.apply_entries(model, entries, mode="strict")
    return model


def cmd_eval(args) -> int:
    model = _model_from_run(args.checkpoint, args.config)
    policy = RelabelPolicy(args.soft_lens_as or "attack")
    records = load_manifest(args.manifest, policy)
    if args.split != "all" and any(r.split in ("train", "test") for r in records):
        records = [r for r in records if r.split == args.split]
    if not records:
        raise DataError(f"no rows selected for split {args.split!r}")
    task = "lens" if model.cfg.task == "lens" else "pad"
    ds = ArrayDataset(records, model.cfg.input_size, task)
    report = evaluate(model, ds, args.threshold)
    text = format_report(report, {"checkpoint": os.path.abspath(args.checkpoint),
                                  "split": args.split, "positive_class": "attack",
                                  "soft_lens_as": policy.soft_lens_as})
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        _write_resolved(args.out, {
            "checkpoint": os.path.abspath(args.checkpoint),
            "manifest": os.path.abspath(args.manifest),
            "split": args.split, "threshold": args.threshold,
            "model": config_to_dict(model.cfg),
        })
    sys.stdout.write(text)
    return 0


# -- gradcheck / dump --------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    if args.scale != "tiny":
        raise UsageError(f"unsupported --scale {args.scale!r} (only 'tiny')")
    results = run_suite(seed=args.seed or 0, corrupt=args.corrupt)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) FAILED: " + ", ".join(r.name for r in failed))
        return 3
    print("all gradient checks passed")
    return 0


def cmd_dump(args) -> int:
    model = _model_from_run(args.checkpoint, args.config)
    model.set_mode(INFER)
    from .data import decode_and_resize

    size = model.cfg.input_size
    img = decode_and_resize(args.image, (size, size))
    stages = [s for s in args.stages.split(",") if s]
    try:
        paths = dump_feature_maps(model, Tensor(img[None, ...]), stages, args.out)
    except ValueError as e:
        raise UsageError(str(e))
    _write_resolved(args.out, {"checkpoint": os.path.abspath(args.checkpoint),
                               "image": os.path.abspath(args.image),
                               "stages": stages, "model": config_to_dict(model.cfg)})
    for s, p in paths.items():
        print(f"{s} -> {p}")
    return 0


# -- parser -----------------------------------------------------------------------


def _add_common_train_flags(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory (user-chosen run id)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--protocol", choices=["intra", "inter", "combined", "cross_database",
                                          "incremental", "lens_detection"])
    p.add_argument("--train-sensors")
    p.add_argument("--test-sensors")
    p.add_argument("--soft-lens-as", choices=["attack", "bonafide"])
    p.add_argument("--ablate", choices=["none", "no-ifcnet", "no-cam", "backbone-only"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--subsample", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--shift", type=float, help="augmentation shift fraction")
    p.add_argument("--shear", type=float, help="augmentation shear degrees")


def build_parser() -> _Parser:
    parser = _Parser(prog="dfcanet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--sensors")
    p.add_argument("--counts", help=f"counts per class: {','.join(LENS_CLASSES)}")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train under a protocol")
    _add_common_train_flags(p)
    p.add_argument("--from-checkpoint", dest="from_checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune from a checkpoint")
    _add_common_train_flags(p)
    p.add_argument("--from-checkpoint", dest="from_checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--soft-lens-as", choices=["attack", "bonafide"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scale", default="tiny")
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)  # negative-control test hook
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump", help="write per-stage feature maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--stages", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
