"""Uncertainty-aware target alignment.

The visible feature is warped onto the infrared grid with a learned dense
offset field, and a reliability head scores how trustworthy each aligned
location is.  The reliability head is trained without labels by trading
the aligned residual against a log barrier that keeps R away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensel import Parameter, ShapeError, Tensor, emit, ops
from .tensel.layers import Conv


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass
class UtaOutput:
    aligned: Tensor
    reliability: Tensor
    offsets: Tensor
    loss_uta: Tensor | None = None


def _same_dims(a: Tensor, b: Tensor, what: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{what}: dims differ, {a.dims} vs {b.dims}")


class OffsetPredictor:
    """concat(rgb, ir) -> 3x3 conv -> tanh -> 3x3 conv to (dx, dy).

    The last conv starts at zero so training begins from the identity warp.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64,
                 clamp: float | None = None, name: str = "uta.offset"):
        self.conv1 = Conv(f"{name}.conv1", 2 * channels, channels, 3, rng, dtype)
        self.conv2 = Conv(f"{name}.conv2", channels, 2, 3, rng, dtype, zero=True)
        self.clamp = clamp

    def __call__(self, f_rgb: Tensor, f_ir: Tensor) -> Tensor:
        _same_dims(f_rgb, f_ir, "predict_offsets")
        h = ops.tanh(self.conv1(ops.concat_channels(f_rgb, f_ir)))
        raw = self.conv2(h)
        bound = self.clamp if self.clamp is not None else float(f_ir.dims[2])
        return ops.clip(raw, -bound, bound)

    def parameters(self) -> list[Parameter]:
        return self.conv1.parameters() + self.conv2.parameters()


class ReliabilityHead:
    """concat(ir, aligned) -> 3x3 conv -> tanh -> 1x1 conv -> sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64, name: str = "uta.phi"):
        self.conv1 = Conv(f"{name}.conv1", 2 * channels, channels, 3, rng, dtype)
        self.conv2 = Conv(f"{name}.conv2", channels, 1, 1, rng, dtype, zero=True)

    def __call__(self, f_ir: Tensor, aligned: Tensor) -> Tensor:
        _same_dims(f_ir, aligned, "predict_reliability")
        h = ops.tanh(self.conv1(ops.concat_channels(f_ir, aligned)))
        return ops.sigmoid(self.conv2(h))

    def parameters(self) -> list[Parameter]:
        return self.conv1.parameters() + self.conv2.parameters()


def predict_offsets(f_rgb: Tensor, f_ir: Tensor, predictor: OffsetPredictor) -> Tensor:
    return predictor(f_rgb, f_ir)


def predict_reliability(f_ir: Tensor, aligned: Tensor, head: ReliabilityHead) -> Tensor:
    return head(f_ir, aligned)


def resample_bilinear(f_rgb: Tensor, offsets: Tensor) -> Tensor:
    """Sample ``f_rgb`` at every grid point p plus its offset, zero outside the image.

    Offset channel 0 is the horizontal displacement, channel 1 the vertical
    one, both in feature pixels.  Gradients flow to the feature and, through
    the derivative of the bilinear weights, to the offsets.
    """
    n, c, h, w = f_rgb.dims
    if offsets.dims != (n, 2, h, w):
        raise ShapeError(f"resample_bilinear: offsets dims {offsets.dims} do not match ({n}, 2, {h}, {w})")
    fd = f_rgb.data
    od = offsets.data.astype(fd.dtype, copy=False)
    ys, xs = np.mgrid[0:h, 0:w].astype(fd.dtype)
    sx = xs + od[:, 0]
    sy = ys + od[:, 1]
    fx = np.floor(sx)
    fy = np.floor(sy)
    ax = (sx - fx)[:, None]
    ay = (sy - fy)[:, None]
    x0 = fx.astype(np.intp)
    y0 = fy.astype(np.intp)

    flat = fd.reshape(n, c, h * w)
    base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi, xi = y0 + dy, x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        lin = np.where(valid, yi * w + xi, 0).reshape(n, 1, h * w)
        vals = np.take_along_axis(flat, np.broadcast_to(lin, (n, c, h * w)), axis=2).reshape(n, c, h, w)
        vals = vals * valid[:, None]
        corners.append((vals, valid[:, None], lin.reshape(n, 1, h, w)))

    (v00, m00, i00), (v01, m01, i01), (v10, m10, i10), (v11, m11, i11) = corners
    w00 = (1 - ax) * (1 - ay)
    w01 = ax * (1 - ay)
    w10 = (1 - ax) * ay
    w11 = ax * ay
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def back(g):
        gidx = []
        gval = []
        for wk, mk, ik in ((w00, m00, i00), (w01, m01, i01), (w10, m10, i10), (w11, m11, i11)):
            gidx.append((base[:, :, None, None] + ik).ravel())
            gval.append((g * wk * mk).ravel())
        gf = np.bincount(np.concatenate(gidx), weights=np.concatenate(gval), minlength=n * c * h * w)
        gf = gf.reshape(n, c, h, w).astype(fd.dtype, copy=False)
        dsx = ((1 - ay) * (v01 - v00) + ay * (v11 - v10)) * g
        dsy = ((1 - ax) * (v10 - v00) + ax * (v11 - v01)) * g
        goff = np.concatenate([dsx.sum(axis=1, keepdims=True), dsy.sum(axis=1, keepdims=True)], axis=1)
        return (gf, goff.astype(offsets.dtype, copy=False))

    return emit(out.astype(fd.dtype, copy=False), (f_rgb, offsets), back)


def uta_loss(f_ir: Tensor, aligned: Tensor, reliability: Tensor, lam: float = 1e-4, eps: float = 1e-8) -> Tensor:
    """Mean over locations of R * |F_ir - F_aligned|_1 - lam * log(R + eps)."""
    if not lam > 0:
        raise ConfigError(f"uta.lambda must be positive, got {lam}")
    if not eps > 0:
        raise ConfigError(f"uta.epsilon must be positive, got {eps}")
    _same_dims(f_ir, aligned, "uta_loss")
    n, _, h, w = f_ir.dims
    if reliability.dims != (n, 1, h, w):
        raise ShapeError(f"uta_loss: reliability dims {reliability.dims}, expected ({n}, 1, {h}, {w})")
    d = ops.l1_distance(f_ir, aligned)
    barrier = ops.scale(ops.log(ops.add_scalar(reliability, eps)), lam)
    return ops.mean_all(ops.sub(ops.mul(reliability, d), barrier))


def optimal_reliability(d, lam: float = 1e-4, eps: float = 1e-8):
    """Per-location minimiser of R*d - lam*log(R+eps) over R in (0, 1)."""
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore"):
        r = lam / d - eps
    return np.clip(r, 0.0, 1.0)


class UTA:
    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64,
                 lam: float = 1e-4, eps: float = 1e-8, offset_clamp: float | None = None):
        if not lam > 0 or not eps > 0:
            raise ConfigError(f"uta.lambda and uta.epsilon must be positive, got {lam}, {eps}")
        self.offset = OffsetPredictor(channels, rng, dtype, clamp=offset_clamp)
        self.phi = ReliabilityHead(channels, rng, dtype)
        self.lam = lam
        self.eps = eps

    def __call__(self, f_rgb: Tensor, f_ir: Tensor) -> UtaOutput:
        offsets = self.offset(f_rgb, f_ir)
        aligned = resample_bilinear(f_rgb, offsets)
        rel = self.phi(f_ir, aligned)
        return UtaOutput(aligned, rel, offsets, uta_loss(f_ir, aligned, rel, self.lam, self.eps))

    def parameters(self) -> list[Parameter]:
        return self.offset.parameters() + self.phi.parameters()
