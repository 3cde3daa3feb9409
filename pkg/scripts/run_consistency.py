"""Train CE and IoU-only arms on matched data and compare consistency ratios.

Usage: python scripts/run_consistency.py [--seeds 0,1,2,3,4] [--steps N] [--out report.json]
"""
import argparse
import json
import sys
from dataclasses import replace

from pointfuse.experiments import consistency_config, run_consistency_experiment


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out", default="consistency_report.json")
    args = ap.parse_args()
    cfg = replace(consistency_config(), seeds=tuple(int(s) for s in args.seeds.split(",")))
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    rep = run_consistency_experiment(cfg, progress=lambda m: print(m, file=sys.stderr, flush=True))
    rep["config"] = cfg.to_dict()
    with open(args.out, "w") as fh:
        json.dump(rep, fh, indent=2)
    for r in rep["replicates"]:
        cells = " ".join(
            f"{row['upsilon']:.1f}:{row['ratio_ce'] if row['ratio_ce'] is None else round(row['ratio_ce'], 3)}"
            f"/{row['ratio_iou'] if row['ratio_iou'] is None else round(row['ratio_iou'], 3)}"
            for row in r["rows"]
        )
        print(f"seed {r['seed']} (R_CE/R_IoU) {cells} -> {'ok' if r['ce_ge_iou_everywhere'] else 'violated'}")
    print(f"{rep['replicates_ce_ge_iou']}/{len(rep['replicates'])} replicates with R_CE >= R_IoU everywhere; "
          f"{rep['runtime_s']:.0f} s; report in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
