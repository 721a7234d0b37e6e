"""Feature distillation objective and the SGD optimiser used to train with it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .can import CanBlockParams, ChannelAligner, align_channels, can_block
from .errors import ConfigInvalid, ShapeMismatch


@dataclass(frozen=True)
class InstanceNormConfig:
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigInvalid("instance-norm epsilon must be positive")


def instance_norm(f: Tensor, cfg: InstanceNormConfig = InstanceNormConfig()) -> Tensor:
    """Standardise each channel over its H x W positions (population variance, no affine)."""
    if f.ndim < 2:
        raise ShapeMismatch("instance_norm needs at least [H, W]")
    x = f.data
    axes = (-2, -1)
    n = x.shape[-2] * x.shape[-1]
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + cfg.epsilon)
    y = centered * inv_std

    def bw(g):
        g_mean = g.sum(axis=axes, keepdims=True) / n
        gy_mean = (g * y).sum(axis=axes, keepdims=True) / n
        return (inv_std * (g - g_mean - y * gy_mean),)

    return ag.record_op(y, (f,), "instance_norm", bw)


def feature_loss(f_t: Tensor, f_s_star: Tensor, cfg: InstanceNormConfig | None = InstanceNormConfig()) -> Tensor:
    """Mean squared difference of the instance-normalised maps.

    The teacher map is detached. ``cfg=None`` skips normalisation (plain L2).
    """
    if f_t.shape != f_s_star.shape:
        raise ShapeMismatch(f"teacher map {f_t.shape} vs student map {f_s_star.shape}")
    t = f_t.detach()
    s = f_s_star
    if cfg is not None:
        t = instance_norm(t, cfg)
        s = instance_norm(s, cfg)
    d = ag.sub(s, t)
    return ag.reduce_mean(ag.mul(d, d))


@dataclass
class LevelDistiller:
    """Per-level student transform: channel alignment then the Can block."""

    can: CanBlockParams | None
    aligner: ChannelAligner | None = None

    def student_star(self, f_s: Tensor, f_t: Tensor) -> Tensor:
        if self.aligner is not None:
            f_s = align_channels(f_s, self.aligner)
        if self.can is not None:
            f_s = can_block(f_s, f_t.detach(), self.can)
        return f_s

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.aligner is not None:
            out.update(self.aligner.parameters())
        if self.can is not None:
            out.update(self.can.parameters())
        return out


@dataclass
class DistillConfig:
    mu: float
    distill_levels: list[int]
    levels: list[LevelDistiller] = field(default_factory=list)
    norm: InstanceNormConfig | None = field(default_factory=InstanceNormConfig)

    def __post_init__(self):
        if not self.mu >= 0:
            raise ConfigInvalid(f"mu must be >= 0, got {self.mu}")
        if not self.distill_levels:
            raise ConfigInvalid("distill_levels must be non-empty")
        if self.levels and len(self.levels) != len(self.distill_levels):
            raise ConfigInvalid("one LevelDistiller per distilled level is required")

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for lvl, d in zip(self.distill_levels, self.levels):
            out.update({f"distill.{lvl}.{k}": v for k, v in d.parameters().items()})
        return out

    def level_pairs(self, teacher_feats: Sequence[Tensor], student_feats: Sequence[Tensor]):
        """(F_T, F_S*) per distilled level; inputs are indexed like ``distill_levels``."""
        return [
            (f_t, d.student_star(f_s, f_t))
            for d, f_t, f_s in zip(self.levels, teacher_feats, student_feats)
        ]


@dataclass
class LossBreakdown:
    task_loss: float
    feat_loss_per_level: list[float]
    feat_loss_total: float
    mu: float
    total: float


def total_loss(task: Tensor, feats: Sequence[tuple[Tensor, Tensor]], cfg: DistillConfig):
    """``task + mu * sum_levels feature_loss``; returns the scalar and a breakdown."""
    if len(feats) != len(cfg.distill_levels):
        raise ShapeMismatch(f"{len(feats)} feature pairs for {len(cfg.distill_levels)} distilled levels")
    per_level = [feature_loss(f_t, f_s, cfg.norm) for f_t, f_s in feats]
    feat = per_level[0]
    for term in per_level[1:]:
        feat = ag.add(feat, term)
    total = ag.add(task, ag.scale(feat, cfg.mu))
    breakdown = LossBreakdown(
        task_loss=task.item(),
        feat_loss_per_level=[t.item() for t in per_level],
        feat_loss_total=feat.item(),
        mu=cfg.mu,
        total=total.item(),
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    step_epochs: list[int] = field(default_factory=list)
    decay_factor: float = 0.1
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epochs_done: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigInvalid("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigInvalid("momentum must lie in [0, 1)")
        if not 0 < self.decay_factor <= 1:
            raise ConfigInvalid("decay_factor must lie in (0, 1]")

    def end_epoch(self) -> float:
        """Mark one epoch finished and apply any decay scheduled at that boundary."""
        self.epochs_done += 1
        if self.epochs_done in self.step_epochs:
            self.learning_rate *= self.decay_factor
        return self.learning_rate


def lr_after(base_lr: float, epochs_done: int, step_epochs: Sequence[int], decay_factor: float) -> float:
    lr = base_lr
    for e in range(1, epochs_done + 1):
        if e in step_epochs:
            lr *= decay_factor
    return lr


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
) -> None:
    """In-place heavy-ball SGD: ``v = m v + g + wd p``, ``p -= lr v``. Missing grads count as zero."""
    for name, p in params.items():
        g = grads.get(name)
        step = np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64)
        if state.weight_decay:
            step = step + state.weight_decay * p.data
        v = state.velocity.get(name)
        if v is not None and state.momentum:
            step = state.momentum * v + step
        state.velocity[name] = step
        p.data -= state.learning_rate * step
