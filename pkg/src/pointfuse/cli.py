"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or parse error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ConfigError, apply_overrides, flatten, load_kv, parse_sets
from .evaluation import ConsistencyConfig, DetectionFormatError, ap_40, group_boxes, read_jsonl, sweep_consistency
from .experiments import (
    ExperimentConfig,
    consistency_config,
    fusion_config,
    run_consistency_experiment,
    run_fusion_ablation,
)
from .geometry import Box3D, iou_3d, mc_iou_oracle
from .gradcheck import run_suite
from .kitti import (
    KittiParseError,
    parse_calib,
    parse_labels,
    parse_velodyne,
    read_kitti_dir,
    serialize_calib,
    serialize_labels,
    serialize_velodyne,
    write_kitti_dir,
)
from .model import LossMode, TwoStreamConfig, prepare_scene, two_stream_forward
from .synth import make_dataset
from .train import CheckpointError, TrainState, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


def _emit(args, payload: dict, text_lines: Sequence[str]) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, default=_json_default))
    else:
        for line in text_lines:
            print(line)
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}.json").write_text(json.dumps(payload, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _fmt(x: Optional[float]) -> str:
    return "undefined" if x is None else f"{x:.6f}"


def _resolve(args, base):
    overrides = load_kv(args.config) if args.config else {}
    overrides.update(parse_sets(args.set or []))
    cfg = apply_overrides(base, overrides)
    print(f"# resolved config: {json.dumps(flatten(cfg), default=_json_default)}", file=sys.stderr)
    return cfg


# commands ------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    t0 = time.perf_counter()
    if args.corrupt:
        if args.corrupt not in T.OP_NAMES:
            raise UsageError(f"unknown operator {args.corrupt!r}; choose from {', '.join(sorted(T.OP_NAMES))}")
        with T.corrupt_backward(args.corrupt, args.factor):
            reports = run_suite(seeds, step=args.step)
    else:
        reports = run_suite(seeds, step=args.step)
    worst: dict[str, float] = {}
    for r in reports:
        worst[r.op_name] = max(worst.get(r.op_name, 0.0), r.max_rel_err)
    failed = sorted(k for k, v in worst.items() if not v <= GRAD_TOL)
    payload = {
        "tolerance": GRAD_TOL,
        "seeds": list(seeds),
        "corrupted_op": args.corrupt,
        "worst_rel_err": worst,
        "failed": failed,
        "runtime_s": time.perf_counter() - t0,
        "reports": [r.to_json() for r in reports],
    }
    lines = [f"{k:18s} {v:.3e} {'FAIL' if k in failed else 'ok'}" for k, v in sorted(worst.items())]
    lines.append(f"{len(worst) - len(failed)}/{len(worst)} operators within {GRAD_TOL:g}")
    _emit(args, payload, lines)
    return EXIT_FAIL if failed else EXIT_OK


def random_box_pair(rng: np.random.Generator) -> tuple[Box3D, Box3D]:
    def box(center):
        return Box3D(*center, *rng.uniform(0.5, 3.0, size=3), rng.uniform(-np.pi, np.pi))

    a = box(rng.normal(0, 0.5, size=3))
    b = box(a.to_array()[:3] + rng.normal(0, 1.0, size=3))
    return a, b


def exact_iou_cases() -> list[tuple[str, float, float]]:
    """(name, computed, expected) for configurations with closed-form overlap."""
    a = Box3D(0.3, 1.0, 5.0, 1.5, 1.7, 4.0, 0.4)
    far = Box3D(10.0, 1.0, 5.0, 1.5, 1.7, 4.0, -0.2)
    cube = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)
    shifted = Box3D(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)
    return [
        ("identity", iou_3d(a, a), 1.0),
        ("disjoint", iou_3d(a, far), 0.0),
        ("unit_cubes_offset_half", iou_3d(cube, shifted), 1.0 / 3.0),
    ]


def cmd_iou_oracle(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows, failures = [], 0
    closed_form = [{"case": n, "iou": v, "expected": e, "ok": abs(v - e) <= 1e-9} for n, v, e in exact_iou_cases()]
    failures += sum(not r["ok"] for r in closed_form)
    for i in range(args.pairs):
        a, b = random_box_pair(rng)
        iou = iou_3d(a, b)
        mc, se = mc_iou_oracle(a, b, args.samples, seed=args.seed * 100003 + i)
        err = abs(iou - mc)
        ok = err <= max(3 * se, args.tol)
        failures += not ok
        rows.append({"iou": iou, "mc": mc, "se": se, "abs_err": err, "ok": ok})
    worst = max((r["abs_err"] for r in rows), default=0.0)
    payload = {
        "pairs": args.pairs,
        "samples": args.samples,
        "seed": args.seed,
        "failures": failures,
        "max_abs_err": worst,
        "exact_cases": closed_form,
        "rows": rows,
    }
    lines = [f"{r['case']}: {r['iou']:.12f} {'ok' if r['ok'] else 'FAIL'}" for r in closed_form]
    lines.append(f"{sum(r['ok'] for r in rows)}/{args.pairs} pairs agree (max |err| {worst:.2e})")
    _emit(args, payload, lines)
    return EXIT_FAIL if failures else EXIT_OK


def cmd_synth(args) -> int:
    cfg = _resolve(args, ExperimentConfig()).scene
    scenes = make_dataset(cfg, args.scenes, args.seed)
    write_kitti_dir(scenes, args.out_dir)
    n_obj = sum(len(s.gt_boxes) for s in scenes)
    payload = {"out_dir": str(args.out_dir), "scenes": len(scenes), "objects": n_obj, "points_per_scene": cfg.n_points}
    _emit(args, payload, [f"wrote {len(scenes)} scenes ({n_obj} objects) to {args.out_dir}"])
    return EXIT_OK


def cmd_parse_kitti(args) -> int:
    root = Path(args.directory)
    if not (root / "velodyne").is_dir():
        raise UsageError(f"{root}: no velodyne/ directory")
    scenes = read_kitti_dir(root)
    mismatches = []
    for s in scenes:
        stem = s.meta["frame"]
        calib_txt = (root / "calib" / f"{stem}.txt").read_text()
        velo_raw = (root / "velodyne" / f"{stem}.bin").read_bytes()
        label_txt = (root / "label_2" / f"{stem}.txt").read_text()
        if parse_calib(serialize_calib(parse_calib(calib_txt))) != parse_calib(calib_txt):
            mismatches.append(f"{stem}: calib")
        if serialize_velodyne(parse_velodyne(velo_raw)) != velo_raw:
            mismatches.append(f"{stem}: velodyne")
        if parse_labels(serialize_labels(parse_labels(label_txt))) != parse_labels(label_txt):
            mismatches.append(f"{stem}: labels")
    payload = {
        "frames": len(scenes),
        "objects": sum(len(s.gt_boxes) for s in scenes),
        "points": int(sum(len(s.points) for s in scenes)),
        "roundtrip_mismatches": mismatches,
    }
    lines = [f"{payload['frames']} frames, {payload['objects']} objects, {payload['points']} points"]
    lines += [f"roundtrip mismatch: {m}" for m in mismatches]
    _emit(args, payload, lines)
    return EXIT_FAIL if mismatches else EXIT_OK


def _training_scenes(args, cfg: ExperimentConfig):
    if getattr(args, "data", None):
        scenes = read_kitti_dir(args.data)
        if not scenes:
            raise UsageError(f"{args.data}: no frames")
        return scenes
    return make_dataset(cfg.scene, cfg.n_train, args.seed)


def cmd_train(args) -> int:
    cfg = _resolve(args, ExperimentConfig(model=TwoStreamConfig(seed=args.seed)))
    steps = args.steps if args.steps is not None else cfg.steps
    mode = LossMode(args.mode)
    if args.resume:
        state = load_checkpoint(args.resume)
        model = state.cfg
    else:
        model, state = cfg.model, None
    scenes = _training_scenes(args, cfg)
    caches = [prepare_scene(s, model) for s in scenes]
    t0 = time.perf_counter()
    res = train(model, [], steps, mode, seed=args.seed, state=state, caches=caches)
    payload = {
        "mode": mode.value,
        "steps": steps,
        "final_step": res.state.step,
        "config": flatten(cfg),
        "loss_trace": res.trace,
        "breakdowns": [b.to_json() for b in res.breakdowns],
        "runtime_s": time.perf_counter() - t0,
    }
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        save_checkpoint(res.state, Path(args.out) / "checkpoint.bin")
    first = res.trace[0] if res.trace else float("nan")
    last = res.trace[-1] if res.trace else float("nan")
    _emit(args, payload, [f"{mode.value}: {steps} steps, loss {first:.4f} -> {last:.4f}, step {res.state.step}"])
    return EXIT_OK


def cmd_experiment(args) -> int:
    base = consistency_config() if args.which == "consistency" else fusion_config()
    cfg = _resolve(args, replace(base, seeds=tuple(range(args.seed, args.seed + args.replicates))))
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    log = (lambda m: print(m, file=sys.stderr)) if not args.quiet else None
    if args.which == "consistency":
        rep = run_consistency_experiment(cfg, progress=log)
        ok = rep["replicates_ce_ge_iou"] >= args.min_replicates
        lines = [f"seed {r['seed']}: R_CE >= R_IoU everywhere: {r['ce_ge_iou_everywhere']}" for r in rep["replicates"]]
        lines.append(f"{rep['replicates_ce_ge_iou']}/{len(rep['replicates'])} replicates in the expected direction")
    else:
        rep = run_fusion_ablation(cfg, progress=log)
        ok = rep["replicates_fusion_gain_ge_2"] >= args.min_replicates and rep["replicates_gate_ge_ungated"] >= args.min_replicates
        lines = [f"seed {r['seed']}: clean {r['clean']} corrupted {r['corrupted']}" for r in rep["replicates"]]
        lines.append(
            f"fusion gain >= 2 AP: {rep['replicates_fusion_gain_ge_2']}/{len(rep['replicates'])}; "
            f"gated >= ungated under corruption: {rep['replicates_gate_ge_ungated']}/{len(rep['replicates'])}"
        )
    rep["config"] = flatten(cfg)
    _emit(args, rep, lines)
    if args.check and not ok:
        return EXIT_FAIL
    return EXIT_OK


def cmd_eval(args) -> int:
    dets = read_jsonl(Path(args.detections).read_text(), need_score=True)
    gts = group_boxes(read_jsonl(Path(args.ground_truth).read_text(), need_score=False))
    if args.ap:
        ap = ap_40(dets, gts, args.iou, recall_positions=args.recall_positions)
        payload = {"metric": f"AP@{args.recall_positions}", "iou_threshold": args.iou, "ap": ap}
        _emit(args, payload, [f"AP@{args.recall_positions} (IoU {args.iou}): {_fmt(ap)}"])
        return EXIT_OK
    ups = tuple(float(u) for u in args.upsilons.split(",")) if args.upsilons else ConsistencyConfig().upsilons
    cc = ConsistencyConfig(tau=args.tau, upsilons=ups)
    rows = sweep_consistency(dets, gts, cc)
    payload = {"tau": cc.tau, "rows": rows}
    lines = [f"upsilon={r['upsilon']:.2f} R={_fmt(r['ratio'])} (n={r['n_candidates']})" for r in rows]
    _emit(args, payload, lines)
    return EXIT_OK


def cmd_fuse_inspect(args) -> int:
    cfg = _resolve(args, ExperimentConfig(model=TwoStreamConfig(seed=args.seed)))
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
    else:
        state = TrainState.create(cfg.model, args.seed)
    if not state.cfg.fused:
        raise UsageError("model has fusion disabled; nothing to inspect")
    scene = make_dataset(cfg.scene, 1, args.seed)[0]
    cache = prepare_scene(scene, state.cfg)
    with T.no_grad():
        out = two_stream_forward(state.params, state.cfg, cache)
    sites = []
    for i, w in enumerate(out.weight_maps):
        d = w.data.ravel()
        sites.append({"site": i, "points": int(d.size), "min": float(d.min()), "mean": float(d.mean()), "max": float(d.max())})
    lines = [f"site {s['site']}: {s['points']} points, w min {s['min']:.3f} mean {s['mean']:.3f} max {s['max']:.3f}" for s in sites]
    _emit(args, {"fusion": state.cfg.fusion, "sites": sites}, lines)
    return EXIT_OK


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--json", action="store_true", help="emit a JSON report on stdout")
    common.add_argument("--out", help="directory for reports and artifacts")

    configured = argparse.ArgumentParser(add_help=False)
    configured.add_argument("--config", help="flat key=value config file")
    configured.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = argparse.ArgumentParser(prog="pointfuse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operator")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--corrupt", metavar="OP", help="negative control: scale the backward of OP")
    g.add_argument("--factor", type=float, default=1.5)
    g.set_defaults(func=cmd_gradcheck)

    o = sub.add_parser("iou-oracle", parents=[common], help="rotated 3D IoU against Monte-Carlo estimates")
    o.add_argument("--pairs", type=int, default=200)
    o.add_argument("--samples", type=int, default=1_000_000)
    o.add_argument("--tol", type=float, default=1e-2)
    o.set_defaults(func=cmd_iou_oracle)

    s = sub.add_parser("synth", parents=[common, configured], help="write synthetic scenes as a KITTI-layout directory")
    s.add_argument("out_dir")
    s.add_argument("--scenes", type=int, default=10)
    s.set_defaults(func=cmd_synth)

    k = sub.add_parser("parse-kitti", parents=[common], help="parse and roundtrip-check a KITTI-layout directory")
    k.add_argument("directory")
    k.set_defaults(func=cmd_parse_kitti)

    t = sub.add_parser("train", parents=[common, configured], help="train the two-stream detector")
    t.add_argument("--mode", choices=[m.value for m in LossMode], default="ce")
    t.add_argument("--steps", type=int)
    t.add_argument("--data", help="KITTI-layout directory (default: synthetic scenes)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("experiment", parents=[common, configured], help="paired training experiments")
    e.add_argument("which", choices=["consistency", "fusion"])
    e.add_argument("--replicates", type=int, default=5)
    e.add_argument("--steps", type=int)
    e.add_argument("--check", action="store_true", help="exit 1 unless the expected direction holds")
    e.add_argument("--min-replicates", type=int, default=4)
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_experiment)

    v = sub.add_parser("eval", parents=[common], help="evaluate detections from JSON lines")
    v.add_argument("detections")
    v.add_argument("ground_truth")
    v.add_argument("--tau", type=float, default=0.7)
    v.add_argument("--upsilons", help="comma-separated confidence thresholds")
    v.add_argument("--ap", action="store_true", help="report AP instead of the consistency sweep")
    v.add_argument("--iou", type=float, default=0.7)
    v.add_argument("--recall-positions", type=int, choices=[11, 40], default=40)
    v.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse-inspect", parents=[common, configured], help="weight-map statistics at every fusion site")
    f.add_argument("--checkpoint")
    f.set_defaults(func=cmd_fuse_inspect)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, KittiParseError, DetectionFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
