"""Where to put the strong augmentation: RL batches, SODA batches, or both.

    python scripts/run_ablation.py --out runs/ablation [--seeds 0,1,2,3,4]
"""

import argparse
from pathlib import Path

from softaug.bench.compare import compare_methods
from softaug.bench.experiments import run_grid

HERE = Path(__file__).parent
METHODS = ("soda_conv", "augment_both_conv", "sac_conv")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--steps", default=None, help="override total_env_steps")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    ov = {"final_variants": "training"}
    if args.steps:
        ov["total_env_steps"] = args.steps
    res = run_grid(HERE / "desk.cfg", METHODS, seeds, args.out, ov, HERE / "desk_soda.cfg")
    print(compare_methods(res.reports, ["training"], Path(args.out) / "ablation.csv"))
    med = {m: res.median(m, "training") for m in METHODS}
    print("median training return:", {m: round(v, 1) for m, v in med.items()})
    print(f"total cpu {res.total_cpu / 60:.1f} min")


if __name__ == "__main__":
    main()
