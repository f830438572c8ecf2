"""Command-line entry point: ``wsloc {synth,train,eval,predict}``.

Option precedence, lowest to highest: built-in defaults, ``--config FILE``
(``key=value`` lines using the option names with underscores), explicit
command-line flags. Every command writes the effective settings to
``config.resolved`` in its output directory.

Exit status: 0 on success, 1 on dataset/model/I-O errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import SynthSpec, load_dataset, synth_generate
from .engine import TrainConfig, evaluate, train
from .errors import WslocError
from .inference import predict, render_overlay, write_predictions
from .metrics import write_pr_curves, write_report
from .tensor import bilinear_resize
from .wslnet import load_network


class UsageError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    out = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{line_no}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _parse_bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {s!r}")


def _parse_ints(s) -> tuple[int, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(int(v) for v in s)
    s = str(s).strip().strip("[]()")
    return tuple(int(v) for v in s.split(",") if v.strip())


def _parse_floats(s) -> tuple[float, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(float(v) for v in s)
    s = str(s).strip().strip("[]()")
    return tuple(float(v) for v in s.split(",") if v.strip())


def _parse_stages(s):
    if isinstance(s, (list, tuple)):
        return tuple(tuple(int(v) for v in st) for st in s)
    try:
        return tuple(tuple(int(v) for v in st) for st in json.loads(s))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"stages must be JSON like [[16,1,2],[32,1,2]]: {exc}") from exc


TRAIN_PARSERS = {
    "epochs": int, "base_lr": float, "milestones": _parse_ints, "decay": float,
    "backbone_lr_divisor": float, "momentum": float, "weight_decay": float, "batch_size": int,
    "seed": int, "flip_prob": float, "rotate_prob": float, "mask": _parse_bool,
    "mask_patch_size": int, "mask_prob": float, "pooling": str, "alpha": float,
    "maps_per_class": int, "stages": _parse_stages, "train_split": str, "val_split": str,
    "checkpoint_every": int,
}

SYNTH_PARSERS = {
    "seed": int, "num_classes": int, "height": int, "width": int, "train": int, "val": int,
    "test": int, "presence": _parse_floats,
}


def write_resolved(out_dir, settings: dict):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={json.dumps(settings[k], sort_keys=True)}\n" for k in sorted(settings)]
    (out / "config.resolved").write_text("".join(lines))


def merge_options(args, parsers: dict, defaults: dict) -> dict:
    """defaults < config file < flags given on the command line."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            if key not in parsers:
                raise UsageError(f"unknown option {key!r} in {args.config}")
            merged[key] = parsers[key](raw)
    for key, parse in parsers.items():
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = parse(value)
    return merged


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args):
    defaults = {"seed": 0, "num_classes": 5, "height": 96, "width": 160,
                "train": 2000, "val": 400, "test": 600, "presence": None}
    o = merge_options(args, SYNTH_PARSERS, defaults)
    presence = o["presence"]
    if presence is None:
        presence = SynthSpec().presence_probs[:o["num_classes"]]
        if len(presence) < o["num_classes"]:
            presence = tuple(presence) + (0.3,) * (o["num_classes"] - len(presence))
    spec = SynthSpec(num_classes=o["num_classes"], height=o["height"], width=o["width"],
                     split_sizes=(("train", o["train"]), ("val", o["val"]), ("test", o["test"])),
                     presence_probs=tuple(presence))
    summary = synth_generate(spec, o["seed"], args.out)
    write_resolved(args.out, {"command": "synth", "out": str(args.out), **o, "presence": list(presence)})
    for split, counts in summary.counts.items():
        print(f"{split}: {summary.sizes[split]} images, class counts {counts.tolist()}")
    return 0


def cmd_train(args):
    defaults = {f.name: f.default for f in fields(TrainConfig) if f.name in TRAIN_PARSERS}
    o = merge_options(args, TRAIN_PARSERS, defaults)
    cfg = TrainConfig(dataset=str(args.dataset), out_dir=str(args.out), **o)
    write_resolved(args.out, {"command": "train", "resume": args.resume, **cfg.to_dict()})
    result = train(cfg, resume=args.resume, progress=not args.quiet)
    print(f"final checkpoint: {result.checkpoint}")
    return 0


def _load_for_eval(args):
    net, ckpt_cfg = load_network(args.checkpoint)
    ds = load_dataset(args.dataset)
    if ds.class_names != ckpt_cfg.get("class_names", ds.class_names):
        raise WslocError(f"dataset classes {ds.class_names} differ from checkpoint classes "
                         f"{ckpt_cfg['class_names']}")
    return net, ckpt_cfg, ds


def cmd_eval(args):
    net, ckpt_cfg, ds = _load_for_eval(args)
    if ds.annotations is None:
        raise WslocError(f"{args.dataset} has no boxes.csv; localization metrics need annotations")
    tol = args.tolerance if args.tolerance is not None else net.backbone_config.global_stride
    write_resolved(args.out, {"command": "eval", "checkpoint": str(args.checkpoint),
                              "dataset": str(args.dataset), "split": args.split, "tolerance": tol})
    report = evaluate(net, ds, args.split, ckpt_cfg["mean_pixel"], tol)
    out = Path(args.out)
    write_report(report, out / "metrics.csv")
    write_pr_curves(report.classification_curves, report.class_names, out / "pr_classification.csv")
    write_pr_curves(report.localization_curves, report.class_names, out / "pr_localization.csv")
    print(f"classification mAP {report.classification_map:.4f}  localization mAP "
          f"{report.localization_map:.4f}  mean distance {report.mean_distance:.2f}%")
    return 0


def cmd_predict(args):
    net, ckpt_cfg, ds = _load_for_eval(args)
    names = ds.split_names(args.split)
    if args.limit is not None:
        names = names[:args.limit]
    write_resolved(args.out, {"command": "predict", "checkpoint": str(args.checkpoint),
                              "dataset": str(args.dataset), "split": args.split,
                              "threshold": args.threshold, "limit": args.limit,
                              "overlays": not args.no_overlays})
    images = np.stack([ds.load_image(n) for n in names])
    preds, maps = predict(net, images, ckpt_cfg["mean_pixel"], args.threshold)
    out = Path(args.out)
    write_predictions(out / "predictions.csv", names, preds, ds.class_names)
    if not args.no_overlays:
        h, w = images.shape[1:3]
        for name, img, m, row in zip(names, images, maps, preds):
            render_overlay(img, bilinear_resize(m, h, w), row, out / "overlays" / (Path(name).stem + ".png"))
    print(f"wrote predictions for {len(names)} images to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wsloc", description="Weakly-supervised object localization from image-level labels.")
    p.add_argument("--version", action="version", version=f"wsloc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--num-classes", dest="num_classes", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--train", type=int)
    s.add_argument("--val", type=int)
    s.add_argument("--test", type=int)
    s.add_argument("--presence", help="comma-separated per-class presence probabilities")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on image-level labels")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    for name, parse in TRAIN_PARSERS.items():
        flag = "--" + name.replace("_", "-")
        if parse in (int, float):
            t.add_argument(flag, dest=name, type=parse)
        else:
            t.add_argument(flag, dest=name)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics for a checkpoint on an annotated split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--tolerance", type=float)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="prediction CSV and overlay images")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--out", required=True)
    r.add_argument("--threshold", type=float, default=0.5)
    r.add_argument("--limit", type=int)
    r.add_argument("--no-overlays", action="store_true")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wsloc: error: {exc}", file=sys.stderr)
        return 2
    except (WslocError, OSError, ValueError) as exc:
        print(f"wsloc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
