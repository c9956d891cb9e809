"""Command-line interface.

Exit codes: 0 success, 1 invalid input/configuration (or a failed gradient
check), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .errors import HetsegError, ValidationError

log = logging.getLogger("hetseg")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _triple(text):
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected N or X,Y,Z, got {text!r}")
    return tuple(parts)


def _out_root(args, exp=None):
    if getattr(args, "out", None):
        return args.out
    if exp is not None:
        return exp.output_root()
    return os.environ.get("HETSEG_OUT") or "."


def _record(out_dir, args, **extra):
    """Write ``run.json`` for commands that do not start from a config file."""
    from ._accel import backend
    from .config import RNG_NOTE, versions

    doc = {
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")},
        "versions": versions(),
        "kernel_backend": backend(),
        "rng": RNG_NOTE,
        **extra,
    }
    os.makedirs(out_dir or ".", exist_ok=True)
    with open(os.path.join(out_dir or ".", "run.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")


def cmd_synth(args):
    from .phantoms import PhantomParams, generate_dataset

    params = {}
    if args.params:
        with open(args.params) as fh:
            params = json.load(fh)
    params["seed"] = args.seed
    if args.modalities:
        params["modalities"] = args.modalities
        params.pop("intensity_means", None)
    params = PhantomParams.from_json(params)
    spec = generate_dataset(params, args.n, args.annotation, args.out, name=args.name)
    _record(args.out, args, phantom=params.to_json())
    print(f"wrote {len(spec.volume_entries)} volumes to {os.path.join(args.out, 'dataset.json')}")
    return 0


def _prepare(args):
    from .config import load_config, prepare_data, provenance

    exp = load_config(args.config)
    out = _out_root(args, exp)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "run.json"), "w") as fh:
        json.dump(provenance(exp), fh, indent=2, sort_keys=True)
    space, train_sets, val_set, _ = prepare_data(exp, os.path.join(out, "data"))
    return exp, out, space, train_sets, val_set


def cmd_train(args):
    from dataclasses import asdict

    from .seeds import derive_seed
    from .training import TrainConfig, train_single

    exp, out, space, train_sets, val_set = _prepare(args)
    cfg = TrainConfig(**{**asdict(exp.train), "loss": args.loss, "seed": derive_seed(exp.master_seed, f"train/{args.loss}")})
    ckpt = os.path.join(out, f"single_{args.loss}.ckpt")
    _, report = train_single(space, train_sets, val_set, cfg, ckpt)
    with open(os.path.join(out, f"train_{args.loss}.json"), "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
    print(f"trained {report.iterations_run} iterations; checkpoint {ckpt}")
    return 0


def cmd_train_multi(args):
    from dataclasses import asdict

    from .seeds import derive_seed
    from .training import TrainConfig, train_multi

    exp, out, space, train_sets, val_set = _prepare(args)
    cfg = TrainConfig(**{**asdict(exp.train), "loss": "ce", "seed": derive_seed(exp.master_seed, "train/multi")})
    _, reports = train_multi(space, train_sets, val_set, cfg, out)
    for ds, rep in zip(train_sets, reports):
        with open(os.path.join(out, f"train_multi_{ds.name}.json"), "w") as fh:
            json.dump(rep.to_json(), fh, indent=2, sort_keys=True)
        print(f"{ds.name}: {rep.iterations_run} iterations; checkpoint {rep.best_checkpoint}")
    return 0


def cmd_predict(args):
    from .network import load_checkpoint, predict_volume
    from .volumes import read_volume, write_nifti

    model = load_checkpoint(args.checkpoint)
    images = dict(item.split("=", 1) for item in args.image)
    missing = [m for m in model.modalities if m not in images]
    if missing:
        raise ValidationError(f"checkpoint needs images for {missing} (use --image NAME=PATH)")
    vol = read_volume([images[m] for m in model.modalities], model.modalities)
    if not args.raw:
        from .volumes import zscore_nonzero

        vol = zscore_nonzero(vol)
    _, mask = predict_volume(model, vol, stride=args.stride, window=args.window)
    write_nifti(args.out, mask, header=vol.header)
    _record(os.path.dirname(args.out), args)
    print(f"wrote {args.out}")
    return 0


def cmd_fuse(args):
    from .training import fuse_labels
    from .volumes import read_nifti, write_nifti

    anatomy, hdr = read_nifti(args.anatomy, as_mask=True)
    lesion, _ = read_nifti(args.lesion, as_mask=True)
    space = None
    if args.config:
        from .config import load_config

        space = load_config(args.config).label_space()
    fused = fuse_labels(anatomy, lesion, space)
    write_nifti(args.out, fused, header=hdr)
    _record(os.path.dirname(args.out), args)
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args):
    from . import metrics
    from .manifest import read_manifest
    from .volumes import read_nifti

    spec, _ = read_manifest(args.truth_dir)
    class_ids = [l.id for l in spec.labels]
    class_names = [l.name for l in spec.labels]
    preds, truths, subjects = [], [], []
    for entry in spec.volume_entries:
        name = os.path.basename(entry.mask)
        pred_path = os.path.join(args.pred_dir, name)
        if not os.path.exists(pred_path):
            raise ValidationError(f"no prediction {pred_path} for {name}")
        preds.append(read_nifti(pred_path, as_mask=True)[0])
        truths.append(read_nifti(entry.mask, as_mask=True)[0])
        subjects.append(name.replace("_mask", "").split(".")[0])
    scores = metrics.dice_scores(preds, truths, class_ids, class_names, subjects)
    table = metrics.render_table({args.system: metrics.summarize(scores)}, class_names)
    out = args.out or args.pred_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "dice.csv"), "w") as fh:
        fh.write(metrics.scores_csv({args.system: scores}))
    with open(os.path.join(out, "table.txt"), "w") as fh:
        fh.write(table)
    _record(out, args)
    print(table, end="")
    return 0


def cmd_gradcheck(args):
    from .losses import gradcheck_suite

    reports = gradcheck_suite(args.loss, args.seed, args.instances, args.classes, args.size, args.tol)
    worst = max(r.max_rel_error for r in reports)
    ok = all(r.passed for r in reports)
    if args.out:
        _record(args.out, args, max_rel_error=worst, passed=ok)
    print(f"loss={args.loss} instances={len(reports)} max relative error: {worst:.3e} (tol {args.tol:g}) {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_experiment(args):
    from .config import load_config
    from .training import run_experiment

    exp = load_config(args.config)
    out = _out_root(args, exp)
    report = run_experiment(exp, out)
    print(report.table, end="")
    print(f"report written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hetseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--annotation", choices=["anatomy_only", "lesion_only", "joint"], default="joint")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--params", help="JSON file with phantom parameters")
    s.add_argument("--modalities", nargs="+")
    s.add_argument("--name")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one single model")
    s.add_argument("--config", required=True)
    s.add_argument("--loss", choices=["ace", "ce", "dice"], required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-multi", help="train one model per dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_multi)

    s = sub.add_parser("predict", help="segment a volume with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", action="append", required=True, metavar="NAME=PATH")
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=_triple)
    s.add_argument("--window", type=_triple)
    s.add_argument("--raw", action="store_true", help="skip per-channel z-scoring")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("fuse", help="overwrite an anatomy mask with lesion labels")
    s.add_argument("--anatomy", required=True)
    s.add_argument("--lesion", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="validate label ids against this experiment config")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("evaluate", help="Dice of predicted masks against a manifest")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--truth-dir", required=True)
    s.add_argument("--out")
    s.add_argument("--system", default="model")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of a loss gradient")
    s.add_argument("--loss", choices=["ace", "ce", "dice"], required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--instances", type=int, default=1)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--size", type=int, default=4)
    s.add_argument("--out", help="directory for run.json")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("experiment", help="run the full comparison from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (HetsegError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report, don't traceback
        log.debug("unhandled", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
