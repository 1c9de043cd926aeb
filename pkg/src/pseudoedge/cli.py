"""Command-line entry point: ``pseudoedge {points,synth,train,eval,ablate,crossval}``.

Exit codes: 0 success, 2 usage or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as cfgmod
from .annotation import extract_points, write_points_csv
from .data import kfold_split, load_dataset, read_mask, save_dataset
from .models import capacity_ladder
from .report import (REFERENCE_LADDER, REFERENCE_TABLE, cross_validate, emit_tables,
                     evaluate_fold, fold_seed, format_cell, render_panels)
from .synth import synth_generate
from .train import Checkpoint, TrainingDiverged, train

log = logging.getLogger("pseudoedge")

EXIT_USAGE = 2
EXIT_RUNTIME = 3


class InputError(Exception):
    pass


def _load_resolved(path):
    if not os.path.isfile(path):
        raise InputError(f"config file {path!r} not found")
    resolved = cfgmod.load_config(path)
    root = resolved["data"]["root"]
    if not root or not os.path.isdir(root):
        raise InputError(f"dataset path {root!r} does not exist")
    return resolved


def _load_corpus(resolved):
    try:
        return load_dataset(resolved["data"]["root"], resolved["data"]["positive_radius"])
    except (FileNotFoundError, ValueError, OSError) as exc:
        raise InputError(str(exc)) from exc


def cmd_points(args):
    if not os.path.isdir(args.masks):
        raise InputError(f"mask directory {args.masks!r} does not exist")
    names = sorted(f for f in os.listdir(args.masks) if f.lower().endswith(".png"))
    os.makedirs(args.out, exist_ok=True)
    for name in names:
        try:
            mask = read_mask(os.path.join(args.masks, name))
        except (OSError, ValueError) as exc:
            raise InputError(f"unreadable mask {name}: {exc}") from exc
        write_points_csv(os.path.join(args.out, os.path.splitext(name)[0] + ".csv"), extract_points(mask))
    print(f"wrote {len(names)} point files to {args.out}")
    return 0


SYNTH_KEYS = {"n_images", "height", "width", "nuclei_per_image_range", "seed", "positive_radius"}


def cmd_synth(args):
    if not os.path.isfile(args.config):
        raise InputError(f"config file {args.config!r} not found")
    with open(args.config) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: not valid JSON ({exc})") from exc
    unknown = set(doc) - SYNTH_KEYS
    if unknown:
        raise InputError(f"unknown synth keys {sorted(unknown)}")
    params = {"n_images": 200, "height": 128, "width": 128, "nuclei_per_image_range": [8, 20],
              "seed": 0, "positive_radius": 0}
    params.update(doc)
    if os.environ.get(cfgmod.SEED_ENV):
        params["seed"] = int(os.environ[cfgmod.SEED_ENV])
    samples = synth_generate(params["n_images"], params["height"], params["width"],
                             tuple(params["nuclei_per_image_range"]), params["seed"], params["positive_radius"])
    save_dataset(samples, args.out, manifest={"generator": params})
    print(f"wrote {len(samples)} synthetic samples to {args.out}")
    return 0


def _split_samples(samples, resolved, fold):
    ev = resolved["evaluation"]
    split = kfold_split([s.id for s in samples], ev["k"], fold, ev["split_seed"])
    byid = {s.id: s for s in samples}
    return ([byid[i] for i in split.train_ids], [byid[i] for i in split.val_ids],
            [byid[i] for i in split.test_ids])


def cmd_train(args):
    resolved = _load_resolved(args.config)
    samples = _load_corpus(resolved)
    fold = args.fold if args.fold is not None else (resolved["evaluation"]["folds"] or [0])[0]
    try:
        tr, va, te = _split_samples(samples, resolved, fold)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = os.path.join(resolved["output_dir"], f"fold{fold}")
    cfgmod.write_resolved(resolved, out)
    tcfg = cfgmod.train_config(resolved)
    tcfg.seed = fold_seed(tcfg.seed, fold)
    ckpt, history = train(tr, va, tcfg)
    ckpt.save(os.path.join(out, "checkpoint.pt"))
    history.save(os.path.join(out, "history.json"))
    if all(s.instance_mask is not None for s in te):
        res = evaluate_fold(ckpt, te, resolved["evaluation"]["threshold"], fold)
        res.checkpoint = os.path.join(out, "checkpoint.pt")
        res.save(os.path.join(out, "test.json"))
        print(f"fold {fold}: best val IoU {history.best_val_iou:.4f} at epoch {history.best_epoch}, "
              f"test IoU {res.iou:.4f}")
    else:
        print(f"fold {fold}: best val IoU {history.best_val_iou:.4f} at epoch {history.best_epoch}")
    return 0


def cmd_eval(args):
    if not os.path.isfile(args.checkpoint):
        raise InputError(f"checkpoint {args.checkpoint!r} not found")
    if not os.path.isdir(args.data):
        raise InputError(f"dataset path {args.data!r} does not exist")
    if not 0 < args.threshold < 1:
        raise InputError("threshold must lie in (0, 1)")
    try:
        ckpt = Checkpoint.load(args.checkpoint)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    try:
        samples = load_dataset(args.data, ids=args.ids)
        res = evaluate_fold(ckpt, samples, args.threshold)
    except (FileNotFoundError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    res.checkpoint = os.path.abspath(args.checkpoint)
    doc = json.dumps(res.to_dict(), indent=2)
    if args.out:
        res.save(args.out)
    else:
        print(doc)
    if args.panels:
        render_panels(samples[:args.panel_rows], ckpt, args.panels, threshold=args.threshold)
    return 0


def _methods_reports(samples, resolved, methods, out_root, labels=None):
    ev = resolved["evaluation"]
    if ev["k"] > len(samples):
        raise InputError(f"k={ev['k']} exceeds the corpus size ({len(samples)})")
    reports, hashes = [], []
    for i, variant in enumerate(methods):
        label = labels[i] if labels else variant["method"]
        out = os.path.join(out_root, label)
        cfgmod.write_resolved(variant, out)
        tcfg = cfgmod.train_config(variant)
        rep = cross_validate(samples, ev["k"], tcfg, out_dir=out, folds=ev["folds"],
                             split_seed=ev["split_seed"], threshold=ev["threshold"])
        reports.append(rep)
        hashes.append(tcfg.config_hash)
    return reports, hashes


def cmd_crossval(args):
    resolved = _load_resolved(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    try:
        variants = [cfgmod.with_method(resolved, m) for m in methods]
    except cfgmod.ConfigError as exc:
        raise InputError(str(exc)) from exc
    samples = _load_corpus(resolved)
    out_root = resolved["output_dir"]
    reports, hashes = _methods_reports(samples, resolved, variants, out_root)
    ref = [format_cell(*REFERENCE_TABLE[m][0]) if m in REFERENCE_TABLE else "" for m in methods]
    paths = emit_tables(reports, out_root, title=f"{resolved['name']}: method comparison",
                        extra_columns={"config_hash": hashes, "reference MoNuSeg": ref})
    print(open(paths["txt"]).read())
    return 0


def cmd_ablate(args):
    resolved = _load_resolved(args.config)
    samples = _load_corpus(resolved)
    preset = resolved["preset"]
    ladder = capacity_ladder(preset)
    variants = [cfgmod.with_edge_spec(resolved, spec) for spec in ladder]
    labels = [spec.name for spec in ladder]
    out_root = os.path.join(resolved["output_dir"], "ablation")
    reports, hashes = _methods_reports(samples, resolved, variants, out_root, labels)
    ref = [format_cell(*REFERENCE_LADDER[s.name.replace("-tiny", "")][0]) for s in ladder]
    paths = emit_tables(reports, out_root, labels=labels, title=f"{resolved['name']}: edge-network capacity",
                        extra_columns={"config_hash": hashes, "seed": [str(resolved["seed"])] * len(ladder),
                                       "reference MoNuSeg": ref})
    print(open(paths["txt"]).read())
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="pseudoedge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("points", help="instance masks -> point CSVs")
    s.add_argument("--masks", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_points)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one fold")
    s.add_argument("--config", required=True)
    s.add_argument("--fold", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--ids", nargs="*")
    s.add_argument("--out")
    s.add_argument("--panels", help="write a qualitative panel PNG here")
    s.add_argument("--panel-rows", type=int, default=4)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="edge-network capacity ladder")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("crossval", help="k-fold comparison of methods")
    s.add_argument("--config", required=True)
    s.add_argument("--methods", default="baseline_ce,pseudo_edge,pseudo_edge_attention")
    s.set_defaults(func=cmd_crossval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (InputError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
