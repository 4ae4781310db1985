"""The full pipeline: per-modality stems, alignment, sparse fusion, head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import dethead, rmoe, uta
from .tensel import Parameter, Tensor, ops
from .tensel.layers import Conv
from .uta import ConfigError


@dataclass
class ModelConfig:
    channels: int = 8
    image_channels: int = 3
    stride: int = 4
    top_k: int = 3
    num_experts: int = 3
    offset_clamp: float | None = None

    def validate(self) -> None:
        if self.channels < 1 or self.image_channels < 1 or self.stride < 1:
            raise ConfigError(f"invalid model dims {self}")
        if self.num_experts != 3:
            raise ConfigError(f"rmoe.num_experts must be 3, got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"rmoe.top_k must be in [1, {self.num_experts}], got {self.top_k}")
        if self.offset_clamp is not None and not self.offset_clamp > 0:
            raise ConfigError(f"uta.offset_clamp must be positive, got {self.offset_clamp}")

    def to_json(self) -> dict:
        return asdict(self)


class Backbone:
    """space-to-depth(stride) -> 1x1 conv -> tanh -> 3x3 conv -> tanh."""

    def __init__(self, name: str, image_channels: int, channels: int, stride: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.stride = stride
        self.reduce = Conv(f"{name}.reduce", image_channels * stride * stride, channels, 1, rng, dtype)
        self.mix = Conv(f"{name}.mix", channels, channels, 3, rng, dtype)

    def __call__(self, img: Tensor) -> Tensor:
        x = ops.space_to_depth(img, self.stride)
        return ops.tanh(self.mix(ops.tanh(self.reduce(x))))

    def parameters(self) -> list[Parameter]:
        return self.reduce.parameters() + self.mix.parameters()


@dataclass
class ForwardOutput:
    f_rgb: Tensor
    f_ir: Tensor
    uta: uta.UtaOutput
    f_in: Tensor
    logits: Tensor
    probs: Tensor
    fusion: rmoe.FusionOutput
    pred: dethead.DetPrediction


class Detector:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32,
                 lam: float = 1e-4, eps: float = 1e-8):
        cfg = config or ModelConfig()
        cfg.validate()
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.backbone_rgb = Backbone("backbone_rgb", cfg.image_channels, c, cfg.stride, rng, dtype)
        self.backbone_ir = Backbone("backbone_ir", cfg.image_channels, c, cfg.stride, rng, dtype)
        self.uta = uta.UTA(c, rng, dtype, lam=lam, eps=eps, offset_clamp=cfg.offset_clamp)
        self.fusion = rmoe.SparseMoEFusion(c, rng, dtype, top_k=cfg.top_k, num_experts=cfg.num_experts)
        self.head = dethead.DetHead(c, rng, dtype)

    def parameters(self) -> list[Parameter]:
        return (self.backbone_rgb.parameters() + self.backbone_ir.parameters() + self.uta.parameters()
                + self.fusion.parameters() + self.head.parameters())

    def shared_param_count(self) -> int:
        expert_ids = {id(p) for p in self.fusion.pool.parameters()}
        return sum(p.size for p in self.parameters() if id(p) not in expert_ids)

    def expert_param_counts(self) -> list[int]:
        return [e.num_params for e in self.fusion.pool]

    def forward(self, rgb, ir, k: int | None = None) -> ForwardOutput:
        rgb = rgb if isinstance(rgb, Tensor) else Tensor(np.asarray(rgb, dtype=self.dtype))
        ir = ir if isinstance(ir, Tensor) else Tensor(np.asarray(ir, dtype=self.dtype))
        f_rgb = self.backbone_rgb(rgb)
        f_ir = self.backbone_ir(ir)
        u = self.uta(f_rgb, f_ir)
        f_in, logits, probs, fused = self.fusion(f_ir, u.aligned, u.reliability, k)
        pred = self.head(fused.fused)
        return ForwardOutput(f_rgb, f_ir, u, f_in, logits, probs, fused, pred)

    __call__ = forward


def compute_losses(out: ForwardOutput, targets: dethead.DetTargets, alpha: float, beta: float):
    l_det = dethead.det_loss(out.pred, targets)
    l_ta = dethead.ta_loss(out.uta.offsets, targets)
    return dethead.total_loss(l_det, l_ta, out.uta.loss_uta, alpha, beta)
