"""Finite-difference checks over every differentiable piece, on a bundled tiny fixture."""

from __future__ import annotations

import numpy as np

from .. import dethead, rmoe, uta
from ..model import Detector, ModelConfig, compute_losses
from ..synthmbu import GeneratorConfig, generate_scene
from ..tensel import GradCheckReport, Parameter, Tensor, grad_check, ops
from ..tensel.layers import Conv

FIXTURE_SEED = 20240611


def _proj(rng, dims):
    return Tensor(rng.standard_normal(dims))


def _randomize(conv: Conv, rng, scale: float = 0.5) -> None:
    conv.weight.data[...] = scale * rng.standard_normal(conv.weight.dims)
    conv.bias.data[...] = scale * rng.standard_normal(conv.bias.dims)


def check_resampler(rng, c=2, h=16, w=16, eps=1e-5) -> GradCheckReport:
    f = Parameter("feature", rng.standard_normal((1, c, h, w)))
    off = Parameter("offsets", rng.uniform(-2.5, 2.5, (1, 2, h, w)))
    # keep samples away from integer positions, where bilinear weights have kinks
    frac = off.data - np.floor(off.data)
    off.data[...] += np.where(np.abs(frac - 0.5) > 0.4, 0.2, 0.0)
    proj = _proj(rng, (1, c, h, w))
    return grad_check(lambda: ops.sum_all(ops.mul(uta.resample_bilinear(f.value, off.value), proj)), [f, off], eps)


def check_reliability_head(rng, c=2, h=16, w=16, eps=1e-5) -> GradCheckReport:
    head = uta.ReliabilityHead(c, rng)
    _randomize(head.conv2, rng)
    f_ir = Parameter("f_ir", rng.standard_normal((1, c, h, w)))
    al = Parameter("aligned", rng.standard_normal((1, c, h, w)))
    proj = _proj(rng, (1, 1, h, w))
    params = [f_ir, al] + head.parameters()
    return grad_check(lambda: ops.sum_all(ops.mul(head(f_ir.value, al.value), proj)), params, eps)


def check_offset_predictor(rng, c=2, h=16, w=16, eps=1e-5) -> GradCheckReport:
    pred = uta.OffsetPredictor(c, rng)
    _randomize(pred.conv2, rng)
    a = Parameter("f_rgb", rng.standard_normal((1, c, h, w)))
    b = Parameter("f_ir", rng.standard_normal((1, c, h, w)))
    proj = _proj(rng, (1, 2, h, w))
    return grad_check(lambda: ops.sum_all(ops.mul(pred(a.value, b.value), proj)), [a, b] + pred.parameters(), eps)


def check_router(rng, c=2, h=16, w=16, eps=1e-5) -> GradCheckReport:
    router = rmoe.Router(2 * c, 3, rng)
    f_in = Parameter("f_in", rng.standard_normal((2, 2 * c, h, w)))
    proj = _proj(rng, (2, 3, 1, 1))
    return grad_check(lambda: ops.sum_all(ops.mul(router(f_in.value)[1], proj)), [f_in] + router.parameters(), eps)


def check_experts(rng, c=2, h=16, w=16, eps=1e-5) -> dict[str, GradCheckReport]:
    pool = rmoe.ExpertPool(c, rng)
    out = {}
    for e in pool:
        f_in = Parameter("f_in", rng.standard_normal((1, 2 * c, h, w)))
        proj = _proj(rng, (1, c, h, w))
        out[f"expert_{e.name}"] = grad_check(lambda e=e, f_in=f_in, proj=proj: ops.sum_all(ops.mul(e(f_in.value), proj)),
                                             [f_in] + e.parameters(), eps)
    return out


def check_det_head(rng, c=2, h=16, w=16, eps=1e-5) -> GradCheckReport:
    head = dethead.DetHead(c, rng)
    fused = Parameter("fused", rng.standard_normal((1, c, h, w)))
    p1, p2 = _proj(rng, (1, 1, h, w)), _proj(rng, (1, 2, h, w))

    def f():
        pred = head(fused.value)
        return ops.add(ops.sum_all(ops.mul(pred.heatmap, p1)), ops.sum_all(ops.mul(pred.sizes, p2)))

    return grad_check(f, [fused] + head.parameters(), eps)


def _targets(rng, h=16, w=16):
    boxes = [[(21.0, 30.0, 10.0, 12.0), (45.0, 14.0, 9.0, 8.0)]]
    return dethead.render_targets(boxes, [(5.0, -3.0)], h, w, 4)


def check_losses(rng, c=2, h=16, w=16, eps=1e-5) -> dict[str, GradCheckReport]:
    f_ir = Parameter("f_ir", rng.standard_normal((1, c, h, w)))
    al = Parameter("aligned", rng.standard_normal((1, c, h, w)))
    rel = Parameter("reliability", rng.uniform(0.05, 0.95, (1, 1, h, w)))
    out = {"loss_uta": grad_check(lambda: uta.uta_loss(f_ir.value, al.value, rel.value, 1e-4, 1e-8), [f_ir, al, rel], eps)}

    tg = _targets(rng, h, w)
    logits = Parameter("logits", rng.standard_normal((1, 1, h, w)))
    sizes = Parameter("sizes", rng.uniform(0.5, 4.0, (1, 2, h, w)))
    # keep size errors away from the |.| kink
    sizes.data[...] += np.where(np.abs(sizes.data - tg.sizes) < 0.05, 0.1, 0.0)

    def det():
        pred = dethead.DetPrediction(logits.value, ops.sigmoid(logits.value), sizes.value)
        return dethead.det_loss(pred, tg)

    out["loss_det"] = grad_check(det, [logits, sizes], eps)
    offs = Parameter("offsets", rng.uniform(-3, 3, (1, 2, h, w)))
    out["loss_ta"] = grad_check(lambda: dethead.ta_loss(offs.value, tg), [offs], eps)
    return out


def check_sparse_fusion(rng, c=2, h=16, w=16, k=2, eps=1e-5) -> GradCheckReport:
    fusion = rmoe.SparseMoEFusion(c, rng, top_k=k)
    _randomize(fusion.router.linear, rng, 1.0)
    n = 3
    # Redraw until every expert is selected by some sample; an expert nobody
    # selects has an exactly-zero router row that finite differences can only
    # resolve to roundoff noise.
    for _ in range(100):
        f_ir = Parameter("f_ir", rng.standard_normal((n, c, h, w)) + rng.uniform(-2, 2, (n, c, 1, 1)))
        al = Parameter("aligned", rng.standard_normal((n, c, h, w)) + rng.uniform(-2, 2, (n, c, 1, 1)))
        rel = Parameter("reliability", rng.uniform(0.05, 0.95, (n, 1, h, w)))
        if fusion(f_ir.value, al.value, rel.value)[3].mask.any(axis=0).all():
            break
    proj = _proj(rng, (n, c, h, w))

    def f():
        _, _, _, out = fusion(f_ir.value, al.value, rel.value)
        return ops.sum_all(ops.mul(out.fused, proj)), out.key()

    return grad_check(f, [f_ir, al, rel] + fusion.parameters(), eps)


def tiny_scene():
    cfg = GeneratorConfig(size=64, max_targets=2)
    return generate_scene(FIXTURE_SEED, cfg)


def check_pipeline(rng, k: int = 3, channels: int = 2, eps=1e-5) -> GradCheckReport:
    """Scene -> stems -> alignment -> sparse fusion -> head -> composite loss, in float64."""
    scene = tiny_scene()
    model = Detector(ModelConfig(channels=channels, top_k=k), seed=1, dtype=np.float64)
    _randomize(model.uta.offset.conv2, rng, 0.3)
    _randomize(model.uta.phi.conv2, rng)
    _randomize(model.fusion.router.linear, rng, 1.0)
    stride = model.config.stride
    h = scene.ir.shape[2] // stride
    tg = dethead.render_targets([scene.boxes], [scene.true_shift], h, h, stride)
    rgb, ir = scene.rgb.astype(np.float64), scene.ir.astype(np.float64)

    def f():
        out = model(rgb, ir)
        total, _ = compute_losses(out, tg, 1.0, 1.0)
        return total, out.fusion.key()

    return grad_check(f, model.parameters(), eps)


def run_all(seed: int = FIXTURE_SEED, eps: float = 1e-5) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = {
        "resampler": check_resampler(rng, eps=eps),
        "offset_predictor": check_offset_predictor(rng, eps=eps),
        "reliability_head": check_reliability_head(rng, eps=eps),
        "router": check_router(rng, eps=eps),
    }
    reports.update(check_experts(rng, eps=eps))
    reports["det_head"] = check_det_head(rng, eps=eps)
    reports.update(check_losses(rng, eps=eps))
    reports["sparse_fusion_k2"] = check_sparse_fusion(rng, k=2, eps=eps)
    reports["pipeline_k3"] = check_pipeline(rng, k=3, eps=eps)
    reports["pipeline_k2"] = check_pipeline(rng, k=2, eps=eps)
    return reports
