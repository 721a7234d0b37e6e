"""Run the ablation sweeps on the default task and collect their reports.

    python3 scripts/run_ablations.py [--only mu,pool] [--seeds 0,1,2] [--jobs 2] [--out-dir runs/ablations]

Sweeps: affinity function, distillation weight mu, teacher pooling scale, the
residual connection, and the loss variant (plain L2 / instance norm + L2 / Can
block + instance norm). Teacher checkpoints are trained once and shared by every
sweep.
"""

import argparse
import logging
import shutil
from pathlib import Path

from cankd.cli import PRESETS
from cankd.config import load_config
from cankd.harness import obtain_teacher, run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out-dir", type=Path, default=Path("runs/ablations"))
    ap.add_argument("--only", default=",".join(PRESETS), help=f"comma-separated subset of {sorted(PRESETS)}")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    teachers = args.out_dir / "teachers"
    for s in seeds:
        scfg = cfg.replace(seed=s)
        obtain_teacher(scfg, teachers / f"teacher_seed{scfg.teacher_seed}.ckpt")

    sections = []
    for name in args.only.split(","):
        out = args.out_dir / name
        out.mkdir(parents=True, exist_ok=True)
        for ckpt in teachers.glob("*.ckpt"):
            shutil.copy(ckpt, out / ckpt.name)
        report = run_ablation(cfg, PRESETS[name], out, seeds=seeds, jobs=args.jobs)
        sections.append(f"## {name}\n\n{report.to_markdown()}")
        print(sections[-1], flush=True)
    (args.out_dir / "summary.md").write_text("\n".join(sections))


if __name__ == "__main__":
    main()
