"""Command-line entry points.

Every subcommand accepts ``--config FILE`` (line-oriented ``key=value``,
'#' comments) plus repeatable ``--set key=value`` overrides; dedicated
flags win over both. Defaults live in RunConfig / SceneSpec.
"""

import argparse
import json
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .decode import count_from_detections
from .detector import load_checkpoint
from .errors import ConfigError, PointDetError
from .pipeline import OracleModel, RunConfig, apply_kv, audit_pseudo_sizes, \
    build_store, detect_scene, evaluate, parse_config_file, simulate_refinement, \
    train, write_report, draw_overlay
from .refinement import PseudoBoxStore
from .synth import SceneSpec, generate_dataset, load_annotations, \
    save_annotations, split_scenes, write_pgm


def _kv_pairs(pairs) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set needs key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = apply_kv(cfg, parse_config_file(args.config))
    cfg = apply_kv(cfg, _kv_pairs(getattr(args, "set", None)))
    direct = {}
    for name in ("annotations", "images_dir", "out_dir", "epochs", "seed",
                 "stride", "batch_size"):
        v = getattr(args, name, None)
        if v is not None:
            direct[name] = v
    if direct:
        cfg = replace(cfg, **direct)
    if getattr(args, "oracle", False):
        cfg = replace(cfg, detector_mode="oracle")
    if getattr(args, "no_refine", False):
        cfg = replace(cfg, refinement=False)
    if getattr(args, "no_crowdedness", False):
        cfg = replace(cfg, crowdedness_loss=False)
    return cfg


def _scene_spec(args) -> SceneSpec:
    spec = SceneSpec()
    kv = _kv_pairs(getattr(args, "set", None))
    if getattr(args, "config", None):
        file_kv = parse_config_file(args.config)
        file_kv.update(kv)
        kv = file_kv
    valid = {f.name: f for f in fields(SceneSpec)}
    updates = {}
    for key, text in kv.items():
        if key not in valid:
            raise ConfigError(f"unknown scene key {key!r}")
        current = getattr(spec, key)
        if isinstance(current, tuple):
            elem = type(current[0])
            updates[key] = tuple(elem(float(x)) for x in text.split(","))
        elif isinstance(current, bool):
            updates[key] = text.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            updates[key] = int(text)
        elif isinstance(current, float):
            updates[key] = float(text)
        else:
            updates[key] = text
    return replace(spec, **updates)


def _select_split(scenes, role, split):
    if role == "all":
        return scenes
    tr, va, te = split_scenes(scenes, split)
    return {"train": tr, "val": va, "test": te}[role]


def cmd_synth(args):
    spec = _scene_spec(args)
    scenes = generate_dataset(spec, args.n_scenes, seed=args.seed or 0)
    os.makedirs(args.out, exist_ok=True)
    ann = os.path.join(args.out, "annotations.jsonl")
    save_annotations(ann, scenes, images_dir=os.path.join(args.out, "images"))
    print(f"wrote {len(scenes)} scenes to {ann}")
    return 0


def cmd_gen_pseudo(args):
    cfg = _run_config(args)
    if args.gak:
        cfg = replace(cfg, luda=replace(cfg.luda, gak_mode=True))
    scenes = load_annotations(cfg.annotations)
    scenes = _select_split(scenes, args.split, cfg.split)
    store = build_store(scenes, cfg.luda, cfg.initial_prior)
    store.save(args.out)
    print(f"wrote pseudo boxes for {len(store.images)} images "
          f"({store.n_boxes()} boxes) to {args.out}")
    return 0


def cmd_train(args):
    cfg = _run_config(args)
    summary = train(cfg, resume=args.resume)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_simulate(args):
    cfg = _run_config(args)
    scenes = load_annotations(cfg.annotations)
    store = build_store(scenes, cfg.luda, cfg.initial_prior)
    oracle = OracleModel(store, cfg.oracle)
    result = simulate_refinement(oracle, store, args.epochs or cfg.epochs,
                                 threshold=cfg.initial_prior)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = os.path.join(cfg.out_dir, "simulation.json")
    with open(out, "w", encoding="utf-8") as f:
        json.dump({"trajectory": result.trajectory,
                   "first_crossing": result.first_crossing,
                   "final": result.final}, f, sort_keys=True, indent=1)
        f.write("\n")
    print("epoch " + " ".join(f"{k:>9s}" for k in result.final))
    for t, stats in enumerate(result.trajectory, start=1):
        print(f"{t:5d} " + " ".join(f"{stats.get(k, float('nan')):9.3f}"
                                    for k in result.final))
    print(f"first crossings: {result.first_crossing}")
    print(f"wrote {out}")
    return 0


def _load_eval_inputs(args):
    cfg = _run_config(args)
    params, _, header = load_checkpoint(args.checkpoint)
    scenes = load_annotations(cfg.annotations, images_dir=cfg.images_dir,
                              load_images=True)
    scenes = _select_split(scenes, args.split, cfg.split)
    return cfg, params, header, scenes


def cmd_infer(args):
    cfg, params, header, scenes = _load_eval_inputs(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    det_path = os.path.join(cfg.out_dir, "detections.txt")
    threshold = args.threshold if args.threshold is not None else cfg.count_threshold
    with open(det_path, "w", encoding="utf-8") as f:
        f.write("# image_id cx cy size score\n")
        for s in scenes:
            dets = [b for b in detect_scene(params, s.image, cfg)
                    if b.score >= threshold]
            for b in dets:
                f.write(f"{s.image_id} {b.cx!r} {b.cy!r} {b.size!r} {b.score!r}\n")
            if args.overlay_dir:
                os.makedirs(args.overlay_dir, exist_ok=True)
                write_pgm(os.path.join(args.overlay_dir, f"{s.image_id}.pgm"),
                          draw_overlay(s.image, dets))
            print(f"{s.image_id}: {count_from_detections(dets, threshold)} objects")
    print(f"wrote {det_path}")
    return 0


def cmd_eval(args):
    cfg, params, header, scenes = _load_eval_inputs(args)
    threshold = args.threshold
    if threshold is None and args.use_best_threshold:
        threshold = (header.get("extra") or {}).get("best_threshold")
        if threshold is None:
            raise ConfigError("checkpoint has no stored best_threshold")
    report = evaluate(params, scenes, cfg, count_threshold=threshold)
    txt, js = write_report(report, cfg.out_dir)
    sys.stdout.write(report.to_text())
    print(f"wrote {txt} and {js}")
    return 0


def cmd_audit_sizes(args):
    cfg = _run_config(args)
    scenes = load_annotations(cfg.annotations)
    scenes = _select_split(scenes, args.split, cfg.split)
    refined = PseudoBoxStore.load(args.store) if args.store else None
    rows = audit_pseudo_sizes(scenes, cfg.luda, cfg.initial_prior, refined)
    for name, row in rows.items():
        cells = "  ".join(f"AP({thr:g})={ap:.4f}" for thr, ap in sorted(row.items()))
        print(f"{name:>8s}: {cells}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({k: {repr(t): v for t, v in row.items()}
                       for k, row in rows.items()}, f, sort_keys=True, indent=1)
            f.write("\n")
        print(f"wrote {args.out}")
    return 0


def _add_common(p, checkpoint=False):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--annotations", help="annotation jsonl file")
    p.add_argument("--images-dir", dest="images_dir", help="directory of PGM images")
    p.add_argument("--out-dir", dest="out_dir", help="artifact directory")
    p.add_argument("--seed", type=int)
    if checkpoint:
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("all", "train", "val", "test"),
                       default="all")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pointdet",
                                 description="point-supervised crowd detection toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-pseudo", help="emit the initial pseudo-box store")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--gak", action="store_true", help="skip local smoothing")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.set_defaults(func=cmd_gen_pseudo)

    p = sub.add_parser("train", help="run the self-training loop")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--stride", type=int, choices=(1, 4))
    p.add_argument("--resume", action="store_true")
    p.add_argument("--oracle", action="store_true",
                   help="simulate posteriors instead of training the detector")
    p.add_argument("--no-refine", dest="no_refine", action="store_true")
    p.add_argument("--no-crowdedness", dest="no_crowdedness", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate-refinement",
                       help="oracle-driven refinement dynamics by crowdedness bucket")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="detect objects and dump boxes")
    _add_common(p, checkpoint=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--overlay-dir", dest="overlay_dir")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="full metrics report")
    _add_common(p, checkpoint=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--use-best-threshold", action="store_true",
                   help="take the validation-searched threshold from the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit-sizes", help="AP of pseudo boxes vs ground truth")
    _add_common(p)
    p.add_argument("--store", help="refined store to include in the table")
    p.add_argument("--split", choices=("all", "train", "val", "test"),
                   default="train")
    p.add_argument("--out", help="write the table as JSON here")
    p.set_defaults(func=cmd_audit_sizes)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PointDetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
