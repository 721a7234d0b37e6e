"""Distilled student vs the mu=0 baseline on the default task, over three seeds.

    python3 scripts/run_distill_vs_baseline.py [--config configs/default.yaml] [--out-dir runs/kd_vs_base]
"""

import argparse
import json
import logging
from pathlib import Path

from cankd.config import load_config
from cankd.harness import run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out-dir", type=Path, default=Path("runs/kd_vs_base"))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    report = run_ablation(cfg, {"distill.mu": [0.0, cfg.distill.mu]}, args.out_dir, seeds=seeds, jobs=args.jobs)
    base, kd = report.arms
    gains = [k - b for k, b in zip(kd.pixel_accuracy, base.pixel_accuracy)]
    print(report.to_markdown())
    print(json.dumps({"baseline_mean": base.mean_pixel_accuracy, "distilled_mean": kd.mean_pixel_accuracy,
                      "per_seed_gain": gains}, indent=2))


if __name__ == "__main__":
    main()
