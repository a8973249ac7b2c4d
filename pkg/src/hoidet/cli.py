"""Command-line entry point.

One executable with subcommands covering the whole pipeline:

    gen        generate synthetic scenes to JSONL
    pretrain   stage-1 detection pretraining
    train      stage-2 interaction training from a stage-1 checkpoint
    infer      dump predictions for a scene file
    eval       role AP of a prediction dump against ground truth
    bench      recomposition timing grid
    gradcheck  finite-difference audit of the set-loss gradients
    ablate     full model vs the three ablated variants

Every command is a pure function of (config, seed, inputs) and writes a run
manifest next to its main output.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

from . import evaluation, pipeline
from .config import load_config
from .data import generate, load_scenes, save_scenes
from .errors import HoidetError
from .model import load_checkpoint, save_checkpoint
from .train import run_gradient_audit, train_stage1, train_stage2


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(command: str, args, cfg, inputs: list, outputs: list,
                    started: float) -> None:
    out = Path(outputs[0])
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "started_at": started,
        "finished_at": time.time(),
    }
    with open(str(out) + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def _cmd_gen(args) -> int:
    cfg = load_config(args.config)
    started = time.time()
    scenes = generate(args.count, cfg.gen, args.seed)
    save_scenes(scenes, args.out)
    _write_manifest("gen", args, cfg, [], [args.out], started)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    cfg.train.seed = args.seed
    started = time.time()
    scenes = load_scenes(args.scenes)
    result = train_stage1(scenes, cfg.model, cfg.train, cfg.loss)
    save_checkpoint(result.model, args.out)
    metrics = args.metrics or (str(args.out) + ".metrics.csv")
    pipeline.write_history_csv(result.history, metrics)
    _write_manifest("pretrain", args, cfg, [args.scenes],
                    [args.out, metrics], started)
    print(f"stage-1 final loss {result.history[-1]['loss']:.4f} "
          f"-> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg.train.seed = args.seed
    started = time.time()
    scenes = load_scenes(args.scenes)
    val = load_scenes(args.val_scenes) if args.val_scenes else None
    model = load_checkpoint(args.checkpoint)
    result = train_stage2(model, scenes, cfg.train, cfg.loss, val_scenes=val)
    save_checkpoint(result.model, args.out)
    metrics = args.metrics or (str(args.out) + ".metrics.csv")
    pipeline.write_history_csv(result.history, metrics)
    inputs = [args.scenes, args.checkpoint]
    if args.val_scenes:
        inputs.append(args.val_scenes)
    _write_manifest("train", args, cfg, inputs, [args.out, metrics], started)
    print(f"stage-2 final loss {result.history[-1]['loss']:.4f} "
          f"-> {args.out}")
    return 0


def _cmd_infer(args) -> int:
    cfg = load_config(args.config)
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    scenes = load_scenes(args.scenes)
    preds = evaluation.infer_scenes(model, scenes,
                                    suppress=args.suppress == "on",
                                    threshold=args.threshold)
    evaluation.save_predictions(preds, args.out)
    _write_manifest("infer", args, cfg, [args.checkpoint, args.scenes],
                    [args.out], started)
    n = sum(len(p.triplets) for p in preds)
    print(f"wrote {n} triplets over {len(preds)} scenes to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    started = time.time()
    preds = evaluation.load_predictions(args.preds)
    gt = load_scenes(args.gt)
    report = evaluation.ap_role(preds, gt, args.scenario)
    print(report.pretty())
    print(f"mAP {report.map:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("\n".join(report.csv_lines()) + "\n")
        _write_manifest("eval", args, cfg, [args.preds, args.gt],
                        [args.out], started)
    return 0


def _cmd_bench(args) -> int:
    cfg = load_config(args.config)
    started = time.time()
    rows = evaluation.bench_recompose(args.ks, args.ns, args.ds,
                                      repeats=args.repeats, seed=args.seed)
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["K", "N", "d", "repeats",
                                               "median_s"])
        writer.writeheader()
        writer.writerows(rows)
    _write_manifest("bench", args, cfg, [], [args.out], started)
    xs = [r["K"] * r["N"] for r in rows]
    ys = [r["median_s"] for r in rows]
    if len(set(xs)) > 1:
        slope, r2 = evaluation.linear_fit_r2(xs, ys)
        print(f"{len(rows)} rows -> {args.out}; K*N fit R^2 {r2:.4f}")
    else:
        print(f"{len(rows)} rows -> {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        from .model import Model
        model = Model(cfg.model, init_seed=args.seed)
    scenes = generate(args.scenes, cfg.gen, args.seed + 7)
    report = run_gradient_audit(model, scenes, cfg.loss,
                                coords_per_tensor=args.coords_per_tensor)
    print(f"gradient audit over {report.n_scenes} scenes: "
          f"max relative error {report.max_relative_error:.3e}")
    if report.max_relative_error > args.fail_above:
        print(f"FAIL: exceeds {args.fail_above:g}", file=sys.stderr)
        return 1
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    cfg.train.seed = args.seed
    started = time.time()
    train_scenes, val_scenes = pipeline.make_split(cfg.gen, args.train_count,
                                                   args.val_count, args.seed)
    rows = pipeline.run_ablation(train_scenes, val_scenes, cfg.model,
                                 cfg.train, cfg.loss,
                                 threshold=args.threshold)
    pipeline.write_ablation_csv(rows, args.out)
    _write_manifest("ablate", args, cfg, [], [args.out], started)
    for row in rows:
        print(f"{row['variant']:20s} mAP#1 {row['map_scenario1']:.4f} "
              f"mAP#2 {row['map_scenario2']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hoidet",
        description="pointer-based set prediction for human-object "
                    "interaction detection on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", default=None, help="JSON config file")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen", help="generate synthetic scenes")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("pretrain", help="stage-1 detection pretraining")
    common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train", help="stage-2 interaction training")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--val-scenes", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="dump predictions for scenes")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--suppress", choices=["on", "off"], default="on")
    p.add_argument("--threshold", type=float, default=0.1)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="role AP of predictions vs ground truth")
    common(p)
    p.add_argument("--preds", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--scenario", type=int, choices=[1, 2], required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="recomposition timing grid")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ks", type=int, nargs="+", default=[64, 128, 256, 512])
    p.add_argument("--ns", type=int, nargs="+", default=[64, 128, 256, 512])
    p.add_argument("--ds", type=int, nargs="+", default=[64])
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scenes", type=int, default=3)
    p.add_argument("--coords-per-tensor", type=int, default=None)
    p.add_argument("--fail-above", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="full model vs ablated variants")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int, default=600)
    p.add_argument("--val-count", type=int, default=150)
    p.add_argument("--threshold", type=float, default=0.1)
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HoidetError as e:
        print(f"error: {type(e).__module__}.{type(e).__name__}: {e}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
