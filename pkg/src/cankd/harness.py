"""Experiment runner: teacher pretraining, student training with the distillation
objective, per-epoch metrics, checkpoints and ablation sweeps."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .can import CanBlockParams, ChannelAligner
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config
from .distill import (
    DistillConfig,
    InstanceNormConfig,
    LevelDistiller,
    OptimizerState,
    sgd_step,
    total_loss,
)
from .errors import CheckpointMissing, ConfigInvalid, NumericalError, ShapeMismatch, SpatialMismatch
from .toy import ToyNet, ToyNetSpec, check_teacher_student, confusion, forward, make_dataset, mean_iou, pixel_accuracy, task_loss

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "epoch",
    "split",
    "task_loss",
    "feat_loss",
    "total_loss",
    "pixel_accuracy",
    "mean_iou",
    "learning_rate",
    "wall_seconds",
)
SPLITS = ("train", "val")


@dataclass
class MetricsRow:
    epoch: int
    split: str
    task_loss: float
    feat_loss: float
    total_loss: float
    pixel_accuracy: float
    mean_iou: float
    learning_rate: float
    wall_seconds: float


@dataclass
class Streams:
    """Independent generators so that turning distillation on or off never shifts
    the data, the student initialisation or the batch order."""

    data: np.random.Generator
    student_init: np.random.Generator
    shuffle: np.random.Generator
    distill_init: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> Streams:
        ss = np.random.SeedSequence(seed)
        return cls(*(np.random.default_rng(s) for s in ss.spawn(4)))


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


def build_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    d = cfg.data
    rng = Streams.from_seed(seed).data
    seeds = rng.integers(0, 2**31 - 1, size=d.train_size + d.val_size)
    tx, ty = make_dataset(seeds[: d.train_size], d.height, d.width, d.num_classes)
    vx, vy = make_dataset(seeds[d.train_size:], d.height, d.width, d.num_classes)
    return Dataset(tx, ty, vx, vy)


def student_spec(cfg: ExperimentConfig) -> ToyNetSpec:
    return ToyNetSpec(widths=list(cfg.student.widths), num_classes=cfg.data.num_classes,
                      feature_taps=list(cfg.student.feature_taps))


def teacher_spec(cfg: ExperimentConfig) -> ToyNetSpec:
    return ToyNetSpec(widths=list(cfg.teacher.widths), num_classes=cfg.data.num_classes,
                      feature_taps=list(cfg.teacher.feature_taps))


# ---------------------------------------------------------------------------
# distillation setup


def build_distiller(cfg: ExperimentConfig, rng: np.random.Generator) -> DistillConfig:
    """Per-level aligners and Can blocks, drawn from the distillation-only stream."""
    d = cfg.distill
    s_spec, t_spec = student_spec(cfg), teacher_spec(cfg)
    levels = []
    for lvl in d.levels:
        c_s = s_spec.widths[lvl]
        c_t = t_spec.widths[lvl]
        aligner = ChannelAligner.init(c_s, c_t, rng) if c_s != c_t else None
        can = None
        if d.method == "cankd":
            can = CanBlockParams.init(c_t, rng, d.affinity, d.embed_dim, d.pool_scale, d.residual)
        levels.append(LevelDistiller(can=can, aligner=aligner))
    norm = None if d.method == "l2" else InstanceNormConfig(d.norm_eps)
    return DistillConfig(mu=d.mu, distill_levels=list(d.levels), levels=levels, norm=norm)


def _select(feats: Sequence[Tensor], taps: Sequence[int], levels: Sequence[int]) -> list[Tensor]:
    return [feats[list(taps).index(lvl)] for lvl in levels]


def check_spatial(cfg: ExperimentConfig, student: ToyNet, teacher: ToyNet, sample: np.ndarray) -> None:
    """Fail before training if tapped student/teacher maps cannot be paired."""
    with ag.no_grad():
        _, s_feats = forward(student, Tensor(sample))
        _, t_feats = forward(teacher, Tensor(sample))
    s_sel = _select(s_feats, student.spec.feature_taps, cfg.distill.levels)
    t_sel = _select(t_feats, teacher.spec.feature_taps, cfg.distill.levels)
    for lvl, fs, ft in zip(cfg.distill.levels, s_sel, t_sel):
        if fs.shape[-2:] != ft.shape[-2:]:
            raise SpatialMismatch(
                f"level {lvl}: student map H x W {fs.shape[-2:]} vs teacher {ft.shape[-2:]} "
                f"(student widths {cfg.student.widths}, teacher widths {cfg.teacher.widths})"
            )


# ---------------------------------------------------------------------------
# training primitives


def _finite(x: float, what: str) -> float:
    if not math.isfinite(x):
        raise NumericalError(f"{what} is not finite ({x})")
    return x


class _Meter:
    def __init__(self, num_classes: int):
        self.k = num_classes
        self.n = 0
        self.sums = {"task": 0.0, "feat": 0.0, "total": 0.0}
        self.conf = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, n: int, task: float, feat: float, total: float, logits: np.ndarray, labels: np.ndarray):
        self.n += n
        self.sums["task"] += n * task
        self.sums["feat"] += n * feat
        self.sums["total"] += n * total
        self.conf += confusion(logits.argmax(axis=-3), labels, self.k)

    def row(self, epoch: int, split: str, lr: float, wall: float) -> MetricsRow:
        n = max(self.n, 1)
        return MetricsRow(
            epoch=epoch,
            split=split,
            task_loss=self.sums["task"] / n,
            feat_loss=self.sums["feat"] / n,
            total_loss=self.sums["total"] / n,
            pixel_accuracy=pixel_accuracy(self.conf),
            mean_iou=mean_iou(self.conf),
            learning_rate=lr,
            wall_seconds=wall,
        )


def _batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def _step_loss(student: ToyNet, x: np.ndarray, y: np.ndarray, teacher_feats, distiller: DistillConfig | None):
    logits, s_feats = forward(student, Tensor(x))
    task = task_loss(logits, y)
    if distiller is None:
        return logits, task, task, 0.0
    s_sel = _select(s_feats, student.spec.feature_taps, distiller.distill_levels)
    pairs = distiller.level_pairs(teacher_feats, s_sel)
    total, bd = total_loss(task, pairs, distiller)
    return logits, task, total, bd.feat_loss_total


def teacher_features(teacher: ToyNet, images: np.ndarray, levels: Sequence[int], batch_size: int = 64):
    """Frozen teacher maps for every image, one array per distilled level."""
    out: list[list[np.ndarray]] = [[] for _ in levels]
    with ag.no_grad():
        for idx in _batches(len(images), batch_size):
            _, feats = forward(teacher, Tensor(images[idx]))
            for k, f in enumerate(_select(feats, teacher.spec.feature_taps, levels)):
                out[k].append(f.data)
    return [np.concatenate(chunks) for chunks in out]


def evaluate(
    net: ToyNet,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int,
    distiller: DistillConfig | None = None,
    t_feats: Sequence[np.ndarray] | None = None,
) -> _Meter:
    meter = _Meter(net.spec.num_classes)
    with ag.no_grad():
        for idx in _batches(len(images), batch_size):
            tf = None if distiller is None else [Tensor(f[idx]) for f in t_feats]
            logits, task, total, feat = _step_loss(net, images[idx], labels[idx], tf, distiller)
            meter.add(len(idx), task.item(), feat, total.item(), logits.data, labels[idx])
    return meter


def train_supervised(net: ToyNet, ds: Dataset, epochs: int, batch_size: int, optim_state: OptimizerState,
                     shuffle: np.random.Generator) -> None:
    """Plain task-loss training (used for the teacher)."""
    params = net.params
    for epoch in range(epochs):
        for idx in _batches(len(ds.train_x), batch_size, shuffle.permutation(len(ds.train_x))):
            logits, task, _, _ = _step_loss(net, ds.train_x[idx], ds.train_y[idx], None, None)
            _finite(task.item(), f"teacher task loss at epoch {epoch}")
            for p in params.values():
                p.zero_grad()
            ag.backward(task)
            sgd_step(params, {k: p.grad for k, p in params.items()}, optim_state)
        optim_state.end_epoch()


# ---------------------------------------------------------------------------
# teacher


def net_state(net: ToyNet, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: p.data for k, p in net.params.items()}


def load_net_state(net: ToyNet, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
    for k, p in net.params.items():
        key = prefix + k
        if key not in state:
            raise ConfigInvalid(f"checkpoint lacks tensor {key!r}")
        if state[key].shape != p.shape:
            raise ConfigInvalid(f"checkpoint tensor {key!r} has shape {state[key].shape}, net expects {p.shape}")
        p.data = np.array(state[key], dtype=np.float64)


def pretrain_teacher(cfg: ExperimentConfig) -> ToyNet:
    seed = cfg.teacher_seed
    ss = np.random.SeedSequence([seed, 0x7EAC])
    init_rng, shuffle_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    teacher = ToyNet.init(teacher_spec(cfg), init_rng)
    ds = build_dataset(cfg, seed)
    o = cfg.teacher.optim
    state = OptimizerState(o.lr, o.momentum, o.weight_decay, list(o.step_epochs), o.decay_factor)
    log.info("pretraining teacher (seed %d, %d epochs)", seed, cfg.teacher.epochs)
    train_supervised(teacher, ds, cfg.teacher.epochs, cfg.batch_size, state, shuffle_rng)
    teacher.freeze()
    return teacher


def obtain_teacher(cfg: ExperimentConfig, ckpt: str | Path | None, pretrain: bool = True) -> ToyNet:
    """Load the teacher from ``ckpt`` or, if allowed, pretrain it and save it there."""
    if ckpt is not None and Path(ckpt).exists():
        teacher = ToyNet.init(teacher_spec(cfg), np.random.default_rng(0))
        load_net_state(teacher, load_checkpoint(ckpt))
        teacher.freeze()
        return teacher
    if not pretrain:
        raise CheckpointMissing(f"teacher checkpoint {ckpt} not found and pretraining is disabled")
    teacher = pretrain_teacher(cfg)
    if ckpt is not None:
        save_checkpoint(net_state(teacher), ckpt)
    return teacher


# ---------------------------------------------------------------------------
# experiment


@dataclass
class RunResult:
    run_dir: Path
    rows: list[MetricsRow]

    def final(self, split: str = "val") -> MetricsRow:
        return [r for r in self.rows if r.split == split][-1]


def _write_rows(run_dir: Path, rows: list[MetricsRow]) -> None:
    with open(run_dir / "metrics.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(asdict(r)) + "\n")


def _write_csv(run_dir: Path, rows: list[MetricsRow]) -> None:
    with open(run_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    teacher_ckpt: str | Path | None = None,
    pretrain_teacher_if_missing: bool = True,
    teacher: ToyNet | None = None,
) -> RunResult:
    """Train one student and write ``metrics.jsonl``, ``summary.csv`` and ``student.ckpt``."""
    cfg.validate()
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_config(cfg))

    streams = Streams.from_seed(cfg.seed)
    ds = build_dataset(cfg, cfg.seed)
    s_spec = student_spec(cfg)
    check_teacher_student(teacher_spec(cfg), s_spec)
    student = ToyNet.init(s_spec, streams.student_init)
    # drawn unconditionally so the stream layout is the same with distillation off
    distiller = build_distiller(cfg, streams.distill_init)

    params: dict[str, Tensor] = dict(student.params)
    train_tf = val_tf = None
    if cfg.distill_active:
        if teacher is None:
            teacher = obtain_teacher(cfg, teacher_ckpt, pretrain_teacher_if_missing)
        check_spatial(cfg, student, teacher, ds.train_x[:1])
        train_tf = teacher_features(teacher, ds.train_x, cfg.distill.levels)
        val_tf = teacher_features(teacher, ds.val_x, cfg.distill.levels)
        params.update(distiller.parameters())
    else:
        distiller = None

    o = cfg.optim
    state = OptimizerState(o.lr, o.momentum, o.weight_decay, list(o.step_epochs), o.decay_factor)
    rows: list[MetricsRow] = []
    t0 = time.perf_counter()
    k = cfg.data.num_classes
    for epoch in range(cfg.epochs):
        lr = state.learning_rate
        meter = _Meter(k)
        order = streams.shuffle.permutation(len(ds.train_x))
        for idx in _batches(len(ds.train_x), cfg.batch_size, order):
            tf = None if distiller is None else [Tensor(f[idx]) for f in train_tf]
            logits, task, total, feat = _step_loss(student, ds.train_x[idx], ds.train_y[idx], tf, distiller)
            _finite(total.item(), f"training loss at epoch {epoch}")
            for p in params.values():
                p.zero_grad()
            ag.backward(total)
            sgd_step(params, {name: p.grad for name, p in params.items()}, state)
            meter.add(len(idx), task.item(), feat, total.item(), logits.data, ds.train_y[idx])
        state.end_epoch()
        wall = time.perf_counter() - t0 if cfg.log_wall_time else 0.0
        rows.append(meter.row(epoch, "train", lr, wall))
        val = evaluate(student, ds.val_x, ds.val_y, cfg.batch_size, distiller, val_tf)
        rows.append(val.row(epoch, "val", lr, wall))
        _finite(rows[-1].total_loss, f"validation loss at epoch {epoch}")
        log.info("epoch %d  train %.4f  val acc %.4f", epoch, rows[-2].total_loss, rows[-1].pixel_accuracy)
        _write_rows(run_dir, rows)

    _write_csv(run_dir, rows)
    state_out = net_state(student, "student.")
    if distiller is not None:
        state_out.update({k: p.data for k, p in distiller.parameters().items()})
    save_checkpoint(state_out, run_dir / "student.ckpt")
    return RunResult(run_dir, rows)


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path) as fh:
        return [MetricsRow(**json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# ablations


@dataclass
class ArmResult:
    name: str
    overrides: dict[str, Any]
    seeds: list[int]
    pixel_accuracy: list[float | None] = field(default_factory=list)
    mean_iou: list[float | None] = field(default_factory=list)
    feat_loss_curves: list[list[float] | None] = field(default_factory=list)
    errors: list[str | None] = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return all(e is None for e in self.errors)

    @property
    def mean_pixel_accuracy(self) -> float | None:
        vals = [v for v in self.pixel_accuracy if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_miou(self) -> float | None:
        vals = [v for v in self.mean_iou if v is not None]
        return float(np.mean(vals)) if vals else None


@dataclass
class AblationReport:
    sweep: dict[str, list[Any]]
    seeds: list[int]
    arms: list[ArmResult]

    @property
    def best_arm(self) -> str | None:
        scored = [(a.mean_pixel_accuracy, a.name) for a in self.arms if a.mean_pixel_accuracy is not None]
        return max(scored)[1] if scored else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "sweep": self.sweep,
            "seeds": self.seeds,
            "best_arm": self.best_arm,
            "arms": [
                {
                    **asdict(a),
                    "mean_pixel_accuracy": a.mean_pixel_accuracy,
                    "mean_iou_mean": a.mean_miou,
                    "completed": a.completed,
                }
                for a in self.arms
            ],
        }

    def to_markdown(self) -> str:
        seed_cols = " | ".join(f"seed {s}" for s in self.seeds)
        lines = [
            f"| arm | {seed_cols} | mean pixel acc | mean mIoU | best |",
            "|" + "---|" * (len(self.seeds) + 4),
        ]
        best = self.best_arm
        for a in self.arms:
            vals = " | ".join("error" if v is None else f"{v:.4f}" for v in a.pixel_accuracy)
            macc = "n/a" if a.mean_pixel_accuracy is None else f"{a.mean_pixel_accuracy:.4f}"
            miou = "n/a" if a.mean_miou is None else f"{a.mean_miou:.4f}"
            lines.append(f"| {a.name} | {vals} | {macc} | {miou} | {'*' if a.name == best else ''} |")
        return "\n".join(lines) + "\n"


def expand_sweep(sweep: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    keys = list(sweep)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(sweep[k] for k in keys))]


def arm_name(overrides: Mapping[str, Any]) -> str:
    return ",".join(f"{k.split('.')[-1]}={v}" for k, v in overrides.items()) or "base"


def _run_arm_seed(args) -> tuple[float, float, list[float]]:
    cfg, out_dir, teacher_ckpt = args
    res = run_experiment(cfg, out_dir, teacher_ckpt=teacher_ckpt)
    final = res.final("val")
    curve = [r.feat_loss for r in res.rows if r.split == "val"]
    return final.pixel_accuracy, final.mean_iou, curve


def run_ablation(
    base: ExperimentConfig,
    sweep: Mapping[str, Sequence[Any]],
    out_dir: str | Path,
    seeds: Sequence[int] = (0, 1, 2),
    jobs: int = 1,
    include_baseline: bool = False,
) -> AblationReport:
    """Run every grid point for every seed; a failing arm is recorded, not fatal.

    All arms for one seed share a teacher checkpoint (``teacher_seed{n}.ckpt``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = expand_sweep(sweep)
    if include_baseline:
        grid = [{"distill.enabled": False}] + grid
    seeds = list(seeds)

    teacher_ckpts = {}
    for s in seeds:
        tcfg = base.replace(seed=s)
        path = out / f"teacher_seed{tcfg.teacher_seed}.ckpt"
        obtain_teacher(tcfg, path)
        teacher_ckpts[s] = path

    arms = [ArmResult(arm_name(ov), dict(ov), seeds) for ov in grid]
    tasks = []
    for arm in arms:
        for s in seeds:
            try:
                cfg = base.replace(seed=s, **arm.overrides)
            except (ConfigInvalid, ShapeMismatch) as exc:
                tasks.append((arm, None, exc))
                continue
            tasks.append((arm, (cfg, out / arm.name / f"seed{s}", teacher_ckpts[s]), None))

    def record(arm: ArmResult, result=None, exc: BaseException | None = None):
        if exc is None:
            acc, miou, curve = result
            arm.pixel_accuracy.append(acc)
            arm.mean_iou.append(miou)
            arm.feat_loss_curves.append(curve)
            arm.errors.append(None)
        else:
            log.warning("arm %s failed: %s", arm.name, exc)
            arm.pixel_accuracy.append(None)
            arm.mean_iou.append(None)
            arm.feat_loss_curves.append(None)
            arm.errors.append(f"{type(exc).__name__}: {exc}")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(arm, pool.submit(_run_arm_seed, a) if a else None, e) for arm, a, e in tasks]
            for arm, fut, exc in futures:
                if fut is None:
                    record(arm, exc=exc)
                    continue
                try:
                    record(arm, fut.result())
                except Exception as err:  # noqa: BLE001 - arm failures are reported, not raised
                    record(arm, exc=err)
    else:
        for arm, a, exc in tasks:
            if a is None:
                record(arm, exc=exc)
                continue
            try:
                record(arm, _run_arm_seed(a))
            except Exception as err:  # noqa: BLE001
                record(arm, exc=err)

    report = AblationReport({k: list(v) for k, v in sweep.items()}, seeds, arms)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out / "report.md").write_text(report.to_markdown())
    return report
