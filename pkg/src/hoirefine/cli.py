"""Command-line entry point: gen / train / eval / sensitivity / report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from typing import List, Optional

from . import metrics, nn, scene
from .geom import GeometryError
from .pipeline import ModelConfig, TrainConfig, TrainingDiverged, load_model, predict, train

log = logging.getLogger("hoirefine")

LOG_ENV = "HOIREFINE_LOG"


class CLIError(Exception):
    pass


def _load_json(path: Optional[str], what: str) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise CLIError(f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CLIError(f"malformed {what} {path}: {exc}") from None
    if not isinstance(d, dict):
        raise CLIError(f"malformed {what} {path}: expected a JSON object")
    return d


def _check_output(path: str, overwrite: bool) -> None:
    if os.path.exists(path) and not overwrite:
        raise CLIError(f"{path} already exists (use --overwrite)")


def _require_dir(path: str, what: str) -> None:
    if not os.path.isdir(path):
        raise CLIError(f"{what} {path} does not exist")


# ---------------------------------------------------------------- subcommands

def cmd_gen(args) -> None:
    cfg = scene.SceneConfig.from_dict(_load_json(args.config, "scene config"))
    _check_output(args.out, args.overwrite)
    if args.num < 1:
        raise CLIError("--num must be at least 1")
    samples = scene.generate(args.num, cfg, args.seed, args.split)
    meta = {"seed": args.seed, "split": args.split, "scene_config": cfg.to_dict()}
    scene.write_dataset(samples, args.out, meta, overwrite=args.overwrite)
    log.info("wrote %d samples to %s", len(samples), args.out)


def cmd_train(args) -> None:
    _require_dir(args.data, "dataset")
    model_cfg = ModelConfig.from_dict(_load_json(args.config, "model config"))
    tc = TrainConfig(seed=args.seed)
    for name in ("epochs", "lr", "batch", "lr_drop_epoch"):
        v = getattr(args, name)
        if v is not None:
            setattr(tc, name, v)
    if tc.epochs < 0 or tc.batch < 1 or tc.lr <= 0:
        raise CLIError("--epochs must be >= 0, --batch >= 1 and --lr > 0")
    _check_output(args.out, args.overwrite)
    data_meta, samples = scene.read_dataset(args.data)
    if args.overwrite and os.path.exists(args.out):
        shutil.rmtree(args.out)
    extra = {"dataset": {k: data_meta.get(k) for k in ("seed", "split", "count", "scene_config")}}
    res = train(samples, args.out, model_cfg, tc, extra)
    print(f"best validation loss {res['best_val']:.6f}; checkpoints in {args.out}")


def cmd_eval(args) -> None:
    _require_dir(args.data, "dataset")
    if args.ckpt is None and not args.gt_as_pred:
        raise CLIError("--ckpt is required unless --gt-as-pred is given")
    if args.ckpt is not None:
        _require_dir(args.ckpt, "checkpoint")
    _check_output(args.report, args.overwrite)
    data_meta, samples = scene.read_dataset(args.data)
    if args.gt_as_pred:
        preds = [metrics.gt_as_prediction(s) for s in samples]
        ck_meta = {"gt_as_prediction": True}
    else:
        model = load_model(args.ckpt)
        preds = predict(model, samples, args.batch)
        ck_meta, _ = nn.read_checkpoint(args.ckpt)
        ck_meta = {k: v for k, v in ck_meta.items() if k != "params"}
    per = [metrics.sample_metrics(p, s) for p, s in zip(preds, samples)]
    meta = {"dataset": {k: data_meta.get(k) for k in ("seed", "split", "count", "scene_config")},
            "checkpoint": ck_meta}
    rep = metrics.aggregate(per, meta)
    metrics.report_write(rep, args.report)
    print(metrics.format_report(rep))


def cmd_sensitivity(args) -> None:
    _require_dir(args.ckpt, "checkpoint")
    _require_dir(args.data, "dataset")
    json_path, pgm_path = args.out + ".json", args.out + ".pgm"
    for p in (json_path, pgm_path):
        _check_output(p, args.overwrite)
    _, samples = scene.read_dataset(args.data)
    if not 0 <= args.sample < len(samples):
        raise CLIError(f"--sample {args.sample} out of range (dataset has {len(samples)} samples)")
    model = load_model(args.ckpt)
    smap = metrics.sensitivity_map(model, samples[args.sample], args.patch, args.stride, args.fill)
    metrics.write_sensitivity(smap, json_path, pgm_path)
    print(f"base CD_object {smap.base_cd:.3f} cm; max delta {smap.grid.max():.3f} cm; "
          f"wrote {json_path} and {pgm_path}")


def cmd_report(args) -> None:
    if not os.path.isfile(args.input):
        raise CLIError(f"report {args.input} does not exist")
    print(metrics.format_report(metrics.report_read(args.input)))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hoirefine", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="scene config JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, default=256)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the pipeline on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="model config JSON (defaults if omitted)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-drop-epoch", dest="lr_drop_epoch", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--report", required=True)
    e.add_argument("--batch", type=int, default=16)
    e.add_argument("--gt-as-pred", dest="gt_as_pred", action="store_true",
                   help="debug: substitute ground truth for the model output")
    e.add_argument("--overwrite", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sensitivity", help="occlusion sensitivity map for one sample")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--sample", type=int, default=0)
    s.add_argument("--patch", type=int, default=16)
    s.add_argument("--stride", type=int, default=4)
    s.add_argument("--fill", type=float, default=0.0)
    s.add_argument("--out", required=True, help="output prefix; writes PREFIX.json and PREFIX.pgm")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_sensitivity)

    r = sub.add_parser("report", help="print an evaluation report")
    r.add_argument("--in", dest="input", required=True)
    r.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CLIError, ValueError, OSError, GeometryError, nn.CheckpointError, scene.DatasetError,
            scene.SceneError, TrainingDiverged) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"hoirefine {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
