"""Command line entry point.

    cankd run     --config cfg.yaml [--mu 5] [--affinity gaussian] ... --out-dir runs/x
    cankd teacher --config cfg.yaml --seed 0 --out teacher.ckpt
    cankd ablate  --config cfg.yaml --preset mu --seeds 0,1,2 --out-dir runs/mu

Exit codes: 0 success, 2 config error, 3 numerical error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .checkpoint import save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import CheckpointMissing, ConfigInvalid, FormatError, NumericalError, ShapeMismatch, VersionMismatch
from .harness import net_state, obtain_teacher, run_ablation, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

PRESETS = {
    "affinity": {"distill.affinity": ["gaussian", "embedded_gaussian", "dot_product"]},
    "mu": {"distill.mu": [2.0, 5.0, 8.0, 10.0]},
    "pool": {"distill.pool_scale": [2, 4, 8]},
    "residual": {"distill.residual": [True, False]},
    "method": {"distill.method": ["l2", "in_l2", "cankd"]},
}


def _bool(text: str) -> bool:
    v = yaml.safe_load(text)
    if not isinstance(v, bool):
        raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")
    return v


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _key_value(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), yaml.safe_load(value)


def _sweep_axis(text: str) -> tuple[str, list]:
    key, sep, values = text.partition("=")
    if not sep or not key or not values:
        raise argparse.ArgumentTypeError(f"expected key=v1,v2,..., got {text!r}")
    return key.strip(), [yaml.safe_load(v) for v in values.split(",")]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults apply when omitted)")
    p.add_argument("--mu", type=float)
    p.add_argument("--affinity", choices=["dot_product", "gaussian", "embedded_gaussian"])
    p.add_argument("--pool-scale", type=int)
    p.add_argument("--residual", type=_bool, metavar="{true,false}")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-distill", action="store_true", help="train the student on the task loss alone")
    p.add_argument("--set", type=_key_value, action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set data.train_size=64")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cankd", description="Cross-attention feature distillation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one student")
    _add_common(run)
    run.add_argument("--out-dir", type=Path, default=Path("runs/run"))
    run.add_argument("--teacher-ckpt", type=Path,
                     help="teacher checkpoint; pretrained and written here if absent")
    run.add_argument("--no-pretrain", action="store_true", help="fail instead of pretraining a missing teacher")

    teacher = sub.add_parser("teacher", help="pretrain a teacher and save its checkpoint")
    _add_common(teacher)
    teacher.add_argument("--out", type=Path, required=True)

    ablate = sub.add_parser("ablate", help="sweep config keys over several seeds")
    _add_common(ablate)
    ablate.add_argument("--out-dir", type=Path, default=Path("runs/ablation"))
    ablate.add_argument("--preset", choices=sorted(PRESETS), action="append", default=[])
    ablate.add_argument("--sweep", type=_sweep_axis, action="append", default=[], metavar="KEY=V1,V2",
                        help="add a grid axis, e.g. --sweep distill.mu=2,5,8,10")
    ablate.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    ablate.add_argument("--jobs", type=int, default=1)
    ablate.add_argument("--baseline", action="store_true", help="add a distillation-disabled arm")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {
        "distill.mu": args.mu,
        "distill.affinity": args.affinity,
        "distill.pool_scale": args.pool_scale,
        "distill.residual": args.residual,
        "seed": args.seed,
        "epochs": args.epochs,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.no_distill:
        overrides["distill.enabled"] = False
    overrides.update(dict(args.set))
    return cfg.replace(**overrides) if overrides else cfg


def _cmd_run(args, cfg: ExperimentConfig) -> int:
    res = run_experiment(cfg, args.out_dir, teacher_ckpt=args.teacher_ckpt,
                         pretrain_teacher_if_missing=not args.no_pretrain)
    final = res.final("val")
    print(json.dumps({"run_dir": str(res.run_dir), "val_pixel_accuracy": final.pixel_accuracy,
                      "val_mean_iou": final.mean_iou}))
    return EXIT_OK


def _cmd_teacher(args, cfg: ExperimentConfig) -> int:
    teacher = obtain_teacher(cfg, None)
    save_checkpoint(net_state(teacher), args.out)
    print(json.dumps({"teacher_ckpt": str(args.out), "seed": cfg.teacher_seed}))
    return EXIT_OK


def _cmd_ablate(args, cfg: ExperimentConfig) -> int:
    sweep: dict[str, list] = {}
    for name in args.preset:
        sweep.update(PRESETS[name])
    sweep.update(dict(args.sweep))
    if not sweep:
        raise ConfigInvalid("ablate needs at least one --preset or --sweep axis")
    if args.jobs < 1:
        raise ConfigInvalid("--jobs must be >= 1")
    report = run_ablation(cfg, sweep, args.out_dir, seeds=args.seeds, jobs=args.jobs,
                          include_baseline=args.baseline)
    print(report.to_markdown())
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return {"run": _cmd_run, "teacher": _cmd_teacher, "ablate": _cmd_ablate}[args.command](args, cfg)
    except (ConfigInvalid, ShapeMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CheckpointMissing, FormatError, VersionMismatch, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
