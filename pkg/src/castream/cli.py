"""Command line entry point: ``castream <command> [flags]``.

Every command prints its fully resolved configuration as a single JSON line
first, writes only under ``--out`` and exits with 0 (ok), 2 (usage), 3 (io),
4 (numeric divergence) or 5 (invariant violation).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import attribution, checkpoint, formats
from .dataset import generate_dataset, load_dataset, save_dataset
from .errors import CastreamError, FormatError, UsageError
from .metrics import (MaskProtocol, evaluate_suite, format_table, threads_from_env,
                      write_reports_csv, write_reports_json)
from .model import CAClassifier
from .saliency import minmax_normalize, upsample_bilinear
from .stream import CLASS_MODES, VARIANTS, StreamConfig
from .training import (BACKBONE_LR0, STREAM_LR0, AblationGrid, OptimizerConfig, ablate, format_ablation, train_backbone,
                       train_stream, write_ablation_csv)

logger = logging.getLogger("castream")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGENCE, EXIT_INVARIANT = 0, 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(value: str) -> list:
    return [v for v in value.split(",") if v]


def _add_optimizer(p, lr, epochs=30):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)


def _add_protocol(p):
    p.add_argument("--step-fraction", type=float, default=1.0 / 64)
    p.add_argument("--blur-kernel", type=int, default=11)
    p.add_argument("--blur-sigma", type=float, default=5.0)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="JSON file whose keys mirror the flags")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--verbose", action="store_true")

    parser = _Parser(prog="castream", description="Cross-attention stream pooling and CAM evaluation")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic shapes dataset")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--classes", type=int, default=4)

    p = sub.add_parser("train-backbone", parents=[common], help="pretrain the staged backbone")
    p.add_argument("--data", default=None)
    _add_optimizer(p, BACKBONE_LR0)

    p = sub.add_parser("train-stream", parents=[common], help="train the stream on a frozen backbone")
    p.add_argument("--backbone", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--variant", choices=VARIANTS, default="vanilla")
    p.add_argument("--start-stage", type=int, default=0)
    p.add_argument("--class-mode", choices=CLASS_MODES, default="agnostic")
    _add_optimizer(p, STREAM_LR0)

    p = sub.add_parser("explain", parents=[common], help="saliency map for one image")
    p.add_argument("--model", default=None)
    p.add_argument("--image", default=None)
    p.add_argument("--method", choices=attribution.METHODS, default="gradcam")
    p.add_argument("--pooling", choices=("gap", "ca"), default="gap")
    p.add_argument("--stage", type=int, default=None)
    p.add_argument("--class", dest="class_index", type=int, default=None)
    p.add_argument("--batch-limit", type=int, default=64)

    p = sub.add_parser("eval", parents=[common], help="interpretability metrics over a split")
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="val")
    p.add_argument("--methods", type=_csv_list, default=["gradcam", "gradcampp", "scorecam"])
    p.add_argument("--poolings", type=_csv_list, default=["gap", "ca"])
    p.add_argument("--stage", type=int, default=None)
    p.add_argument("--limit", type=int, default=None, help="evaluate only the first N samples")
    p.add_argument("--batch-limit", type=int, default=64)
    _add_protocol(p)

    p = sub.add_parser("ablate", parents=[common], help="stream ablation grid")
    p.add_argument("--grid-spec", default=None, help="JSON object or path to one")
    p.add_argument("--backbone", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--eval-limit", type=int, default=None)
    p.add_argument("--method", choices=attribution.METHODS, default="gradcam")
    _add_optimizer(p, STREAM_LR0)
    return parser


def _resolve(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required: " + ", ".join(
            ["gen-data", "train-backbone", "train-stream", "explain", "eval", "ablate"]))
    if args.config:
        cfg = _read_json(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(k.replace("-", "_") for k in cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
        for key in ("methods", "poolings"):
            if isinstance(getattr(args, key, None), str):
                setattr(args, key, _csv_list(getattr(args, key)))
    return args


def _read_json(path_or_text: str):
    if os.path.exists(path_or_text):
        with open(path_or_text) as fh:
            text = fh.read()
    elif path_or_text.lstrip().startswith("{"):
        text = path_or_text
    else:
        raise FileNotFoundError(path_or_text)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON: {exc}") from None


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def _require_file(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)


def _opt_config(args) -> OptimizerConfig:
    return OptimizerConfig(args.lr, args.momentum, args.weight_decay, args.epochs, args.batch_size, args.seed)


def _split_dir(data: str, split: str) -> str:
    sub = os.path.join(data, split)
    return sub if os.path.isdir(sub) else data


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


# ----------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    if not 0.0 <= args.val_fraction < 1.0:
        raise UsageError("--val-fraction must lie in [0, 1)")
    n_val = int(round(args.n * args.val_fraction))
    train = generate_dataset(args.n - n_val, args.seed, args.classes)
    save_dataset(train, os.path.join(args.out, "train"))
    if n_val:
        save_dataset(generate_dataset(n_val, args.seed + 1, args.classes), os.path.join(args.out, "val"))
    _write_json(os.path.join(args.out, "manifest.json"),
                {"n_train": args.n - n_val, "n_val": n_val, "seed": args.seed, "classes": args.classes})


def cmd_train_backbone(args) -> None:
    _require(args, "data")
    train = load_dataset(_split_dir(args.data, "train"))
    val_dir = os.path.join(args.data, "val")
    val = load_dataset(val_dir) if os.path.isdir(val_dir) else None
    classes = int(train.labels.max()) + 1
    manifest = os.path.join(args.data, "manifest.json")
    if os.path.exists(manifest):
        classes = _read_json(manifest).get("classes", classes)
    backbone, history = train_backbone(train, _opt_config(args), val=val, num_classes=classes)
    checkpoint.save_model(os.path.join(args.out, "backbone.cast"), backbone, extra={"seed": args.seed})
    history.write_csv(os.path.join(args.out, "history.csv"))
    _write_json(os.path.join(args.out, "summary.json"),
                {"val_acc": history.summary.get("val_acc"), "digest": backbone.param_digest()})


def cmd_train_stream(args) -> None:
    _require(args, "backbone", "data")
    _require_file(args.backbone)
    backbone, _, _ = checkpoint.load_model(args.backbone)
    backbone.freeze()
    if not 0 <= args.start_stage <= backbone.last_stage:
        raise UsageError(f"--start-stage must lie in 0..{backbone.last_stage}")
    train = load_dataset(_split_dir(args.data, "train"))
    val_dir = os.path.join(args.data, "val")
    val = load_dataset(val_dir) if os.path.isdir(val_dir) else None
    cfg = StreamConfig(args.start_stage, args.variant, args.class_mode, args.seed)
    stream, history = train_stream(backbone, train, _opt_config(args), cfg, val=val)
    checkpoint.save_model(os.path.join(args.out, "model.cast"), backbone, stream, extra={"seed": args.seed})
    history.write_csv(os.path.join(args.out, "history.csv"))
    summary = {"backbone_digest": history.summary["backbone_digest"], "stream_val_acc": history.summary.get("val_acc")}
    if val is not None:
        summary["gap_val_acc"] = CAClassifier(backbone).accuracy(val.images, val.labels, "gap")
    _write_json(os.path.join(args.out, "summary.json"), summary)


def _load_classifier(path) -> CAClassifier:
    _require_file(path)
    backbone, stream, _ = checkpoint.load_model(path)
    return CAClassifier(backbone, stream)


def cmd_explain(args) -> None:
    _require(args, "model", "image")
    _require_file(args.image)
    model = _load_classifier(args.model)
    stage = model.backbone.last_stage if args.stage is None else args.stage
    attribution.validate(model, args.method, args.pooling, stage)
    image = formats.hwc_to_image(formats.read_ppm(args.image))
    if image.shape != model.backbone.input_shape:
        raise UsageError(f"image shape {image.shape} does not match model input {model.backbone.input_shape}")
    class_index = args.class_index
    if args.method == "rawattention" and class_index is not None:
        print("warning: --class is ignored for rawattention (class agnostic)", file=sys.stderr)
        class_index = None
    if class_index is not None and not 0 <= class_index < model.num_classes:
        raise UsageError(f"--class must lie in 0..{model.num_classes - 1}")
    smap = attribution.explain(model, image, args.method, class_index, stage, args.pooling, args.batch_limit)
    H, W = image.shape[1:]
    up = minmax_normalize(upsample_bilinear(smap.values, H, W))
    formats.write_pgm(os.path.join(args.out, "saliency.pgm"), formats.to_uint8(up))
    formats.write_ppm(os.path.join(args.out, "overlay.ppm"), formats.image_to_hwc(formats.overlay(image, up)))
    cls = None if smap.class_index is None else int(smap.class_index)
    _write_json(os.path.join(args.out, "explain.json"),
                {"method": args.method, "pooling": args.pooling, "stage": int(stage), "class": cls,
                 "map_shape": list(smap.shape)})


def _protocol(args) -> MaskProtocol:
    return MaskProtocol(step_fraction=args.step_fraction, blur_kernel=args.blur_kernel, blur_sigma=args.blur_sigma)


def cmd_eval(args) -> None:
    _require(args, "model", "data")
    model = _load_classifier(args.model)
    for m in args.methods:
        if m not in attribution.METHODS:
            raise UsageError(f"unknown method {m!r}")
    for p in args.poolings:
        model.check_pooling(p)
    stage = model.backbone.last_stage if args.stage is None else args.stage
    for m in args.methods:
        for p in args.poolings:
            if not (m == "rawattention" and p == "gap"):
                attribution.validate(model, m, p, stage)
    data = load_dataset(_split_dir(args.data, args.split))
    if args.limit is not None:
        data = data.head(args.limit)
    reports = evaluate_suite(model, data, args.methods, args.poolings, _protocol(args), stage,
                             threads=threads_from_env(), batch_limit=args.batch_limit)
    write_reports_csv(reports, os.path.join(args.out, "metrics.csv"))
    write_reports_json(reports, os.path.join(args.out, "metrics.json"))
    with open(os.path.join(args.out, "table.md"), "w") as fh:
        fh.write(format_table(reports) + "\n")


def cmd_ablate(args) -> None:
    spec = _read_json(args.grid_spec) if args.grid_spec else {}
    if not isinstance(spec, dict):
        raise UsageError("--grid-spec must be a JSON object")
    backbone_path = args.backbone or spec.get("backbone")
    data_dir = args.data or spec.get("data")
    if not backbone_path or not data_dir:
        raise UsageError("ablate requires --backbone and --data (or the same keys in --grid-spec)")
    _require_file(backbone_path)
    grid = AblationGrid.from_dict(spec)
    for v in grid.variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
    for m in grid.class_modes:
        if m not in CLASS_MODES:
            raise UsageError(f"unknown class mode {m!r}")
    backbone, _, _ = checkpoint.load_model(backbone_path)
    backbone.freeze()
    for s in grid.start_stages:
        if not 0 <= s <= backbone.last_stage:
            raise UsageError(f"start stage {s} outside 0..{backbone.last_stage}")
    train = load_dataset(_split_dir(data_dir, "train"))
    val = load_dataset(_split_dir(data_dir, "val"))
    eval_limit = args.eval_limit if args.eval_limit is not None else spec.get("eval_limit")
    eval_set = val if eval_limit is None else val.head(int(eval_limit))
    if eval_limit == 0:
        eval_set = None
    rows = ablate(backbone, train, val, grid, _opt_config(args), eval_set, args.method, args.seed)
    write_ablation_csv(rows, os.path.join(args.out, "ablation.csv"))
    with open(os.path.join(args.out, "ablation.md"), "w") as fh:
        fh.write(format_ablation(rows) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-backbone": cmd_train_backbone,
    "train-stream": cmd_train_stream,
    "explain": cmd_explain,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _exit_code(exc: BaseException) -> tuple:
    if isinstance(exc, CastreamError):
        return exc.exit_code, exc.category
    if isinstance(exc, (OSError, FormatError)):
        return EXIT_IO, "io"
    return 1, "internal"


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _resolve(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        _require(args, "out")
        resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "verbose")}
        print(json.dumps(resolved, sort_keys=True, default=str), flush=True)
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](args)
    except Exception as exc:  # one line, machine parsable
        code, category = _exit_code(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {category}: {msg}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
