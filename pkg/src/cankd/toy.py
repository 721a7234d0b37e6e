"""Desk-scale dense-prediction task: a procedural shape-labelling dataset and
small conv nets that act as teacher and student."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigInvalid, ShapeMismatch

NOISE_SIGMA = 0.05
MAX_SHAPES = 4
# Mean colour per foreground class. Families overlap once jitter is added, so
# colour alone does not identify a class and the net has to look at shape too.
_CLASS_COLOURS = np.array(
    [
        [0.85, 0.35, 0.30],
        [0.75, 0.45, 0.35],
        [0.35, 0.45, 0.80],
        [0.45, 0.75, 0.40],
        [0.70, 0.70, 0.30],
        [0.60, 0.35, 0.70],
        [0.30, 0.70, 0.70],
    ]
)
COLOUR_JITTER = 0.15


@dataclass
class SyntheticSample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    label_map: np.ndarray  # [H, W] int64
    seed: int


def _class_colour(k: int) -> np.ndarray:
    return _CLASS_COLOURS[(k - 1) % len(_CLASS_COLOURS)]


def generate_sample(
    seed: int, h: int = 32, w: int = 32, num_classes: int = 4, num_shapes: int | None = None
) -> SyntheticSample:
    """Render 1-4 shapes of distinct foreground classes over background class 0.

    Odd classes are drawn as axis-aligned rectangles, even classes as discs. At
    most ``num_classes - 1`` shapes are drawn so their classes stay distinct.
    """
    if h < 8 or w < 8:
        raise ConfigInvalid("synthetic samples need H, W >= 8")
    if num_classes < 2:
        raise ConfigInvalid("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    n_fg = num_classes - 1
    if num_shapes is None:
        num_shapes = int(rng.integers(1, MAX_SHAPES + 1))
    num_shapes = min(num_shapes, n_fg)

    bg = rng.uniform(0.1, 0.5, size=3)
    image = np.empty((3, h, w))
    image[:] = bg[:, None, None]
    labels = np.zeros((h, w), dtype=np.int64)

    yy, xx = np.mgrid[0:h, 0:w]
    classes = rng.choice(np.arange(1, num_classes), size=num_shapes, replace=False)
    lo, hi = max(3, min(h, w) // 6), max(4, min(h, w) // 2)
    for k in classes:
        k = int(k)
        colour = np.clip(_class_colour(k) + rng.uniform(-COLOUR_JITTER, COLOUR_JITTER, size=3), 0, 1)
        if k % 2 == 1:
            sh, sw = rng.integers(lo, hi + 1, size=2)
            top = int(rng.integers(0, h - sh + 1))
            left = int(rng.integers(0, w - sw + 1))
            mask = (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
        else:
            r = rng.uniform(lo / 2 + 0.5, hi / 2 + 0.5)
            cy, cx = rng.uniform(r - 1, h - r), rng.uniform(r - 1, w - r)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        image[:, mask] = colour[:, None]
        labels[mask] = k
    image += rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return SyntheticSample(image=image, label_map=labels, seed=seed)


def make_dataset(seeds, h: int, w: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    samples = [generate_sample(int(s), h, w, num_classes) for s in seeds]
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label_map for s in samples])
    return images, labels


# ---------------------------------------------------------------------------
# networks


@dataclass
class ToyNetSpec:
    widths: list[int]
    num_classes: int = 4
    feature_taps: list[int] = field(default_factory=lambda: [1, 2])
    in_channels: int = 3
    downsample_after: int | None = 0  # stage index followed by 2x2 max pooling
    activation: str = "relu"

    def __post_init__(self):
        if not self.widths or any(c < 1 for c in self.widths):
            raise ConfigInvalid(f"invalid widths {self.widths}")
        if self.num_classes < 2:
            raise ConfigInvalid("num_classes must be >= 2")
        if not self.feature_taps or any(not 0 <= t < self.num_stages for t in self.feature_taps):
            raise ConfigInvalid(f"feature taps {self.feature_taps} out of range for {self.num_stages} stages")
        if self.downsample_after is not None and not 0 <= self.downsample_after < self.num_stages:
            raise ConfigInvalid("downsample_after must name a stage")
        if self.activation not in ("relu", "none"):
            raise ConfigInvalid(f"unknown activation {self.activation!r}")

    @property
    def num_stages(self) -> int:
        return len(self.widths)

    def tap_channels(self) -> list[int]:
        return [self.widths[t] for t in self.feature_taps]


def check_teacher_student(teacher: ToyNetSpec, student: ToyNetSpec) -> None:
    if teacher.num_stages != student.num_stages:
        raise ConfigInvalid("teacher and student need the same number of stages")
    if any(t < s for t, s in zip(teacher.widths, student.widths)):
        raise ConfigInvalid("teacher widths must be >= student widths stage-wise")
    if teacher.num_classes != student.num_classes:
        raise ConfigInvalid("teacher and student disagree on num_classes")


@dataclass
class ToyNet:
    spec: ToyNetSpec
    params: dict[str, Tensor]

    @classmethod
    def init(cls, spec: ToyNetSpec, rng: np.random.Generator) -> ToyNet:
        params: dict[str, Tensor] = {}
        c_in = spec.in_channels
        for i, c_out in enumerate(spec.widths):
            fan_in = c_in * 9
            params[f"stage{i}.w"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3)), True)
            params[f"stage{i}.b"] = Tensor(np.zeros(c_out), True)
            c_in = c_out
        bound = np.sqrt(1.0 / c_in)
        params["head.w"] = Tensor(rng.uniform(-bound, bound, size=(spec.num_classes, c_in)), True)
        params["head.b"] = Tensor(np.zeros(spec.num_classes), True)
        return cls(spec, params)

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None


def forward(net: ToyNet, image: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Per-pixel logits ``[.., K, H, W]`` and the tapped stage outputs."""
    spec = net.spec
    if image.ndim not in (3, 4) or image.shape[-3] != spec.in_channels:
        raise ShapeMismatch(f"expected [.., {spec.in_channels}, H, W] image, got {image.shape}")
    h, w = image.shape[-2:]
    if spec.downsample_after is not None and (h % 2 or w % 2):
        raise ShapeMismatch("downsampling nets need even H and W")
    x = image
    feats = []
    for i in range(spec.num_stages):
        x = ag.conv2d(x, net.params[f"stage{i}.w"])
        x = ag.add_channel_bias(x, net.params[f"stage{i}.b"])
        if spec.activation == "relu":
            x = ag.relu(x)
        if i == spec.downsample_after:
            x = ag.maxpool2d(x, 2)
        if i in spec.feature_taps:
            feats.append(x)
    logits = ag.add_channel_bias(ag.conv1x1(x, net.params["head.w"]), net.params["head.b"])
    if spec.downsample_after is not None:
        logits = ag.upsample_nearest(logits, 2)
    return logits, feats


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """``[.., H, W]`` ints -> ``[.., K, H, W]`` floats."""
    oh = np.eye(num_classes)[labels]
    return np.moveaxis(oh, -1, -3)


def task_loss(logits: Tensor, label_map: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy."""
    label_map = np.asarray(label_map)
    k = logits.shape[-3]
    if logits.shape[:-3] + logits.shape[-2:] != label_map.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {label_map.shape}")
    if label_map.min(initial=0) < 0 or label_map.max(initial=0) >= k:
        raise ShapeMismatch(f"labels must lie in [0, {k})")
    n_pix = label_map.size
    picked = ag.mul(ag.log_softmax(logits, axis=-3), Tensor(one_hot(label_map, k)))
    return ag.scale(ag.reduce_sum(picked), -1.0 / n_pix)


def confusion(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    idx = labels.reshape(-1) * num_classes + pred.reshape(-1)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def pixel_accuracy(conf: np.ndarray) -> float:
    return float(np.trace(conf) / max(conf.sum(), 1))


def mean_iou(conf: np.ndarray) -> float:
    """Mean IoU over classes that occur in either prediction or ground truth."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - tp
    present = union > 0
    return float((tp[present] / union[present]).mean()) if present.any() else 0.0
