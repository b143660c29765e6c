"""SAC vs SODA(overlay) on the training scene and on held-out colors.

    python scripts/run_generalization.py --out runs/generalization [--seeds 0,1,2,3,4]
"""

import argparse
from pathlib import Path

from softaug.bench.compare import compare_methods
from softaug.bench.experiments import run_grid

HERE = Path(__file__).parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/generalization")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--methods", default="sac,soda_overlay")
    ap.add_argument("--variants", default="training,color_hard")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    methods = args.methods.split(",")
    variants = args.variants.split(",")
    res = run_grid(HERE / "desk.cfg", methods, seeds, args.out, {"final_variants": args.variants},
                   HERE / "desk_soda.cfg")
    print(compare_methods(res.reports, variants, Path(args.out) / "generalization.csv"))
    for v in variants:
        print(v, "median:", {m: round(res.median(m, v), 1) for m in methods})
    print(f"total cpu {res.total_cpu / 60:.1f} min")


if __name__ == "__main__":
    main()
