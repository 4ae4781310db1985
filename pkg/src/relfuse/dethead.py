"""Single-class center-heatmap head, surrogate losses, and the optimizer."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .tensel import Parameter, ShapeError, Tensor, ops
from .tensel.layers import Conv
from .uta import ConfigError

HEAT_SIGMA = 1.0


@dataclass
class DetPrediction:
    logits: Tensor
    heatmap: Tensor
    sizes: Tensor


class DetHead:
    """Two conv branches over the fused feature: center logits and box (w, h)."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64,
                 zero: bool = False, size_bias: float = 2.0, heat_prior: float = 0.01, name: str = "head"):
        # The center-logit bias starts at the background prior, so early training
        # is not spent pulling every cell down from 0.5.
        heat_bias = 0.0 if zero else float(np.log(heat_prior / (1.0 - heat_prior)))
        self.heat1 = Conv(f"{name}.heat1", channels, channels, 3, rng, dtype, zero=zero)
        self.heat2 = Conv(f"{name}.heat2", channels, 1, 1, rng, dtype, zero=zero, bias_init=heat_bias)
        self.size1 = Conv(f"{name}.size1", channels, channels, 3, rng, dtype, zero=zero)
        self.size2 = Conv(f"{name}.size2", channels, 2, 1, rng, dtype, zero=zero,
                          bias_init=0.0 if zero else size_bias)

    def __call__(self, fused: Tensor) -> DetPrediction:
        if fused.dims[1] != self.heat1.cin:
            raise ShapeError(f"detect: fused feature has {fused.dims[1]} channels, head expects {self.heat1.cin}")
        logits = self.heat2(ops.tanh(self.heat1(fused)))
        sizes = ops.relu(self.size2(ops.tanh(self.size1(fused))))
        return DetPrediction(logits, ops.sigmoid(logits), sizes)

    def parameters(self) -> list[Parameter]:
        return [p for c in (self.heat1, self.heat2, self.size1, self.size2) for p in c.parameters()]


def detect(fused: Tensor, head: DetHead) -> DetPrediction:
    return head(fused)


def to_feature(x, stride: int):
    """Image pixel coordinate -> feature-grid coordinate (cell j is centred on pixel stride*j + (stride-1)/2)."""
    return (np.asarray(x, dtype=np.float64) - (stride - 1) / 2.0) / stride


def to_image(u, stride: int):
    return np.asarray(u, dtype=np.float64) * stride + (stride - 1) / 2.0


@dataclass
class DetTargets:
    heat: np.ndarray
    sizes: np.ndarray
    positive: np.ndarray
    box_mask: np.ndarray
    shift: np.ndarray

    def take(self, rows) -> "DetTargets":
        return DetTargets(self.heat[rows], self.sizes[rows], self.positive[rows], self.box_mask[rows],
                          self.shift[rows])


def render_targets(boxes: Sequence[Sequence[tuple]], shifts, h: int, w: int, stride: int,
                   sigma: float = HEAT_SIGMA, dtype=np.float64) -> DetTargets:
    """Ground-truth maps on the feature grid for a batch of scenes.

    The center map is the max over Gaussian splats at each target's continuous
    feature position, with the nearest cell forced to 1.  Size targets and the
    positive mask live on that nearest cell.  ``box_mask`` marks cells whose
    centers fall inside a box (plus the nearest cell); alignment supervision
    is restricted to it.  ``shifts`` are image-pixel shifts.
    """
    n = len(boxes)
    heat = np.zeros((n, 1, h, w), dtype=dtype)
    sizes = np.zeros((n, 2, h, w), dtype=dtype)
    pos = np.zeros((n, 1, h, w), dtype=bool)
    bmask = np.zeros((n, 1, h, w), dtype=bool)
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    cx_img, cy_img = to_image(uu, stride), to_image(vv, stride)
    for i, scene_boxes in enumerate(boxes):
        for cx, cy, bw, bh in scene_boxes:
            u, v = to_feature(cx, stride), to_feature(cy, stride)
            g = np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / (2 * sigma ** 2))
            heat[i, 0] = np.maximum(heat[i, 0], g)
            r = int(np.clip(np.round(v), 0, h - 1))
            c = int(np.clip(np.round(u), 0, w - 1))
            heat[i, 0, r, c] = 1.0
            sizes[i, :, r, c] = (bw / stride, bh / stride)
            pos[i, 0, r, c] = True
            inside = (np.abs(cx_img - cx) <= bw / 2) & (np.abs(cy_img - cy) <= bh / 2)
            bmask[i, 0] |= inside
            bmask[i, 0, r, c] = True
    shift = np.asarray(shifts, dtype=np.float64).reshape(n, 2) / stride
    return DetTargets(heat, sizes, pos, bmask, shift)


def det_loss(pred: DetPrediction, targets: DetTargets) -> Tensor:
    """Mean BCE of the center map plus mean L1 (w + h) error over positive cells."""
    bce = ops.mean_all(ops.bce_with_logits(pred.logits, targets.heat))
    size_err = ops.l1_distance(pred.sizes, Tensor(targets.sizes.astype(pred.sizes.dtype)))
    return ops.add(bce, ops.masked_mean(size_err, targets.positive))


def ta_loss(offsets: Tensor, targets: DetTargets) -> Tensor:
    """Mean |offset - true shift| over box cells and both offset channels (feature pixels)."""
    n, _, h, w = offsets.dims
    field = np.broadcast_to(targets.shift[:, :, None, None], (n, 2, h, w)).astype(offsets.dtype)
    err = ops.abs_(ops.sub(offsets, Tensor(field)))
    return ops.masked_mean(err, np.broadcast_to(targets.box_mask, (n, 2, h, w)))


@dataclass
class LossBreakdown:
    l_det: float
    l_ta: float
    l_uta: float
    total: float
    alpha: float
    beta: float


def total_loss(l_det, l_ta, l_uta, alpha: float = 1.0, beta: float = 1.0) -> tuple[Tensor | None, LossBreakdown]:
    """Composite objective l_det + alpha * l_ta + beta * l_uta.

    Accepts tensors (returns the differentiable total alongside the float
    breakdown) or plain floats (tensor slot is None).
    """
    if alpha < 0 or beta < 0:
        raise ConfigError(f"alpha and beta must be nonnegative, got {alpha}, {beta}")
    vals = [x.item() if isinstance(x, Tensor) else float(x) for x in (l_det, l_ta, l_uta)]
    parts = LossBreakdown(vals[0], vals[1], vals[2], vals[0] + alpha * vals[1] + beta * vals[2], alpha, beta)
    if not all(isinstance(x, Tensor) for x in (l_det, l_ta, l_uta)):
        return None, parts
    total = ops.add(ops.add(l_det, ops.scale(l_ta, alpha)), ops.scale(l_uta, beta))
    return total, parts


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 1e-4
    epsilon: float = 1e-8
    lr: float = 1e-3
    epochs: int = 80
    batch: int = 16
    seed: int = 0

    def validate(self) -> None:
        for name in ("alpha", "beta", "lam", "epsilon", "lr"):
            if not getattr(self, name) >= 0 or (name in ("lam", "epsilon", "lr") and not getattr(self, name) > 0):
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0 or self.batch < 1 or self.seed < 0:
            raise ConfigError(f"invalid epochs/batch/seed: {self.epochs}/{self.batch}/{self.seed}")

    def to_json(self) -> dict:
        return asdict(self)


class Adam:
    """Adaptive-moment updates with bias correction and a constant step size."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data[...] -= update.astype(p.data.dtype, copy=False)
