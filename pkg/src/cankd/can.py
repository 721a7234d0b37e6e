"""Cross-attention non-local (Can) block.

Student positions act as queries and teacher positions as keys/values::

    theta = W_theta F_S          (query embedding, D channels)
    phi   = pool(W_phi F_T)      (key embedding, D channels)
    g     = pool(W_g F_T)        (values, C channels)
    z_i   = prefactor * sum_j xi(x_i, y_j) g_j
    F_S*  = W_Z Z (+ F_S when the residual is on)

Maps may be ``[C, H, W]`` or batched ``[B, C, H, W]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigInvalid, GaussianChannelMismatch, ShapeMismatch, SpatialMismatch

CAN_POOL_SCALES = (1, 2, 4, 8)


class AffinityKind(str, enum.Enum):
    DOT_PRODUCT = "dot_product"
    GAUSSIAN = "gaussian"
    EMBEDDED_GAUSSIAN = "embedded_gaussian"

    @property
    def uses_embeddings(self) -> bool:
        return self is not AffinityKind.GAUSSIAN

    @property
    def uses_softmax(self) -> bool:
        return self is not AffinityKind.DOT_PRODUCT


class Affinity(NamedTuple):
    matrix: Tensor
    # "count": caller divides the weighted sum by the number of teacher positions.
    # "softmax": rows already sum to one, prefactor is 1.
    normalization: str


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class CanBlockParams:
    w_g: Tensor
    w_z: Tensor
    w_theta: Tensor | None = None
    w_phi: Tensor | None = None
    affinity: AffinityKind = AffinityKind.DOT_PRODUCT
    pool_scale: int = 2
    residual: bool = True

    def __post_init__(self):
        self.affinity = AffinityKind(self.affinity)
        if self.pool_scale not in CAN_POOL_SCALES:
            raise ConfigInvalid(f"pool_scale must be one of {CAN_POOL_SCALES}, got {self.pool_scale}")
        c = self.w_g.shape[0]
        if self.w_g.shape != (c, c) or self.w_z.shape != (c, c):
            raise ShapeMismatch(f"w_g {self.w_g.shape} and w_z {self.w_z.shape} must both be C x C")
        has_emb = (self.w_theta is not None, self.w_phi is not None)
        if self.affinity.uses_embeddings:
            if not all(has_emb):
                raise ConfigInvalid(f"{self.affinity.value} affinity needs w_theta and w_phi")
            d = self.w_theta.shape[0]
            if d < 1 or self.w_theta.shape != (d, c) or self.w_phi.shape != (d, c):
                raise ShapeMismatch(
                    f"w_theta {self.w_theta.shape} and w_phi {self.w_phi.shape} must both be D x {c}"
                )
        elif any(has_emb):
            raise ConfigInvalid("gaussian affinity takes no w_theta / w_phi")

    @property
    def channels(self) -> int:
        return self.w_g.shape[0]

    @property
    def embed_dim(self) -> int | None:
        return None if self.w_theta is None else self.w_theta.shape[0]

    @classmethod
    def init(
        cls,
        channels: int,
        rng: np.random.Generator,
        affinity: AffinityKind | str = AffinityKind.DOT_PRODUCT,
        embed_dim: int | None = None,
        pool_scale: int = 2,
        residual: bool = True,
    ) -> CanBlockParams:
        """Random embeddings in +-sqrt(1/C); W_Z starts at zero so the block starts as identity."""
        affinity = AffinityKind(affinity)
        d = channels if embed_dim is None else embed_dim
        w_theta = w_phi = None
        if affinity.uses_embeddings:
            w_theta = _uniform(rng, (d, channels), channels)
            w_phi = _uniform(rng, (d, channels), channels)
        w_g = _uniform(rng, (channels, channels), channels)
        w_z = Tensor(np.zeros((channels, channels)), requires_grad=True)
        return cls(w_g=w_g, w_z=w_z, w_theta=w_theta, w_phi=w_phi, affinity=affinity,
                   pool_scale=pool_scale, residual=residual)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.w_theta is not None:
            out["w_theta"] = self.w_theta
            out["w_phi"] = self.w_phi
        out["w_g"] = self.w_g
        out["w_z"] = self.w_z
        return out


@dataclass
class ChannelAligner:
    w_align: Tensor

    @classmethod
    def init(cls, c_student: int, c_teacher: int, rng: np.random.Generator) -> ChannelAligner:
        return cls(_uniform(rng, (c_teacher, c_student), c_student))

    @property
    def in_channels(self) -> int:
        return self.w_align.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w_align.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"w_align": self.w_align}


def affinity_matrix(x_emb: Tensor, y_emb: Tensor, kind: AffinityKind | str) -> Affinity:
    """Pairwise affinities between rows of ``x_emb [.., N_s, D]`` and ``y_emb [.., N_t, D]``."""
    kind = AffinityKind(kind)
    if x_emb.shape[-1] != y_emb.shape[-1]:
        err = GaussianChannelMismatch if kind is AffinityKind.GAUSSIAN else ShapeMismatch
        raise err(f"feature widths differ: {x_emb.shape[-1]} vs {y_emb.shape[-1]}")
    if x_emb.shape[:-2] != y_emb.shape[:-2]:
        raise ShapeMismatch(f"batch extents differ: {x_emb.shape} vs {y_emb.shape}")
    dots = ag.matmul(x_emb, ag.transpose2d(y_emb))
    if kind.uses_softmax:
        return Affinity(ag.softmax_rows(dots), "softmax")
    return Affinity(dots, "count")


def _flatten_spatial(f: Tensor) -> Tensor:
    """``[.., C, H, W] -> [.., H*W, C]``."""
    lead, (c, h, w) = f.shape[:-3], f.shape[-3:]
    return ag.transpose2d(ag.reshape(f, lead + (c, h * w)))


def _check_pair(f_s: Tensor, f_t: Tensor, params: CanBlockParams) -> None:
    if f_s.ndim not in (3, 4) or f_t.ndim != f_s.ndim:
        raise ShapeMismatch(f"expected [C,H,W] or [B,C,H,W] maps, got {f_s.shape} and {f_t.shape}")
    if f_s.shape[-2:] != f_t.shape[-2:]:
        raise SpatialMismatch(f"student H x W {f_s.shape[-2:]} != teacher H x W {f_t.shape[-2:]}")
    if f_s.shape[:-3] != f_t.shape[:-3]:
        raise ShapeMismatch(f"batch extents differ: {f_s.shape} vs {f_t.shape}")
    if f_s.shape[-3] != f_t.shape[-3]:
        err = GaussianChannelMismatch if params.affinity is AffinityKind.GAUSSIAN else ShapeMismatch
        raise err(f"student has {f_s.shape[-3]} channels, teacher {f_t.shape[-3]}; align first")
    if f_s.shape[-3] != params.channels:
        raise ShapeMismatch(f"maps have {f_s.shape[-3]} channels, block expects {params.channels}")


def can_operation(f_s: Tensor, f_t: Tensor, params: CanBlockParams) -> Tensor:
    """Z: each student position aggregates (pooled) teacher values by affinity."""
    _check_pair(f_s, f_t, params)
    if params.affinity.uses_embeddings:
        query = ag.conv1x1(f_s, params.w_theta)
        key = ag.conv1x1(f_t, params.w_phi)
    else:
        query, key = f_s, f_t
    value = ag.conv1x1(f_t, params.w_g)
    if params.pool_scale > 1:
        key = ag.maxpool2d(key, params.pool_scale)
        value = ag.maxpool2d(value, params.pool_scale)

    aff = affinity_matrix(_flatten_spatial(query), _flatten_spatial(key), params.affinity)
    z = ag.matmul(aff.matrix, _flatten_spatial(value))  # [.., N_s, C]
    if aff.normalization == "count":
        n_pooled = value.shape[-2] * value.shape[-1]
        z = ag.scale(z, 1.0 / n_pooled)
    return ag.reshape(ag.transpose2d(z), f_s.shape)


def can_block(f_s: Tensor, f_t: Tensor, params: CanBlockParams) -> Tensor:
    """F_S* = W_Z Z + F_S, or W_Z Z alone with the residual switched off."""
    out = ag.conv1x1(can_operation(f_s, f_t, params), params.w_z)
    if params.residual:
        out = ag.add(out, f_s)
    return out


def align_channels(f_s: Tensor, aligner: ChannelAligner) -> Tensor:
    if f_s.ndim < 3 or f_s.shape[-3] != aligner.in_channels:
        raise ShapeMismatch(f"aligner expects {aligner.in_channels} input channels, got map {f_s.shape}")
    return ag.conv1x1(f_s, aligner.w_align)
