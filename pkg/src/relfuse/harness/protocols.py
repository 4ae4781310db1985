"""Evaluation protocols: plain AP, test-time RGB shift sweep, top-k sweep, routing statistics."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import rmoe
from ..dethead import TrainConfig
from ..model import Detector, ModelConfig
from ..synthmbu import SynthScene, apply_test_shift
from ..training import load_checkpoint, predict, save_checkpoint, stack_scenes, train
from .metrics import ap_summary, decode

log = logging.getLogger(__name__)

DEFAULT_MAGNITUDES = (0, 5, 10, 20, 40)
DEFAULT_SEEDS = (0, 1, 2)
DIRECTIONS = (("+x", (1, 0)), ("-x", (-1, 0)), ("+y", (0, 1)), ("-y", (0, -1)))


@dataclass
class EvalResult:
    ap50: float
    ap75: float
    ap5095: float
    gates: np.ndarray
    reliability: np.ndarray
    masks: np.ndarray


def evaluate(model: Detector, scenes: Sequence[SynthScene], k: int | None = None,
             threshold: float = 0.3, max_dets: int = 10) -> EvalResult:
    data = stack_scenes(scenes, model.config.stride, model.dtype)
    outs = predict(model, data.rgb, data.ir, k)
    heat = np.concatenate([o.pred.heatmap.data for o in outs])
    sizes = np.concatenate([o.pred.sizes.data for o in outs])
    stride = model.config.stride
    dets = [decode(heat[i, 0], sizes[i], threshold, max_dets, stride) for i in range(len(data))]
    s = ap_summary(dets, data.boxes)
    return EvalResult(s["ap50"], s["ap75"], s["ap5095"],
                      np.concatenate([o.probs.data[:, :, 0, 0] for o in outs]).astype(np.float64),
                      np.concatenate([o.uta.reliability.data for o in outs]).astype(np.float64),
                      np.concatenate([o.fusion.mask for o in outs]))


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


# ------------------------------------------------------------- shift sweep

@dataclass
class ShiftRow:
    shift: int
    direction: str
    seed: int | str
    ap50: float
    ap5095: float
    applied: tuple[int, int] = (0, 0)


@dataclass
class EvalReport:
    rows: list[ShiftRow] = field(default_factory=list)
    image_width: int = 64
    cap: int = 16

    def condition(self, shift: int, direction: str, seed) -> ShiftRow:
        for r in self.rows:
            if (r.shift, r.direction, r.seed) == (shift, direction, seed):
                return r
        raise KeyError((shift, direction, seed))

    def aggregate(self, shift: int) -> tuple[ShiftRow, ShiftRow]:
        return self.condition(shift, "mean", "mean"), self.condition(shift, "mean", "std")

    @property
    def magnitudes(self) -> list[int]:
        return sorted({r.shift for r in self.rows})

    def csv(self) -> str:
        return _write_csv(["shift", "direction", "seed", "ap50", "ap5095"],
                          [[r.shift, r.direction, r.seed, _fmt(r.ap50), _fmt(r.ap5095)] for r in self.rows])

    def table(self) -> str:
        lines = ["Shift   Applied  Width    AP50 (%)        AP50:95 (%)     Note",
                 "------  -------  -------  --------------  --------------  ----------------"]
        for s in self.magnitudes:
            m, sd = self.aggregate(s)
            applied = min(s, self.cap)
            note = f"clipped to {self.cap} px" if applied != s else ""
            lines.append(f"{s:>3d} px  {applied:>4d} px  {applied / self.image_width:6.3f}   "
                         f"{100 * m.ap50:6.2f} ± {100 * sd.ap50:4.2f}  "
                         f"{100 * m.ap5095:6.2f} ± {100 * sd.ap5095:4.2f}  {note}".rstrip())
        return "\n".join(lines) + "\n"


def eval_shift(models: Sequence[tuple[int, Detector]], scenes: Sequence[SynthScene],
               magnitudes: Sequence[int] = DEFAULT_MAGNITUDES, threshold: float = 0.3,
               max_dets: int = 10) -> EvalReport:
    """Shift only the visible frame at test time and average the four axis directions.

    Shifts larger than the generator cap (a quarter of the image width) are
    clipped to the cap and annotated in the table.
    """
    if any(int(m) != m or m < 0 for m in magnitudes):
        raise ValueError(f"shift magnitudes must be nonnegative integers, got {list(magnitudes)}")
    if not scenes:
        raise ValueError("no scenes to evaluate")
    width = scenes[0].rgb.shape[-1]
    cap = width // 4
    report = EvalReport(image_width=width, cap=cap)
    per_seed: dict[int, dict[int, ShiftRow]] = {}
    for seed, model in models:
        per_seed[seed] = {}
        for s in magnitudes:
            s = int(s)
            if s == 0:
                r = evaluate(model, scenes, threshold=threshold, max_dets=max_dets)
                row = ShiftRow(0, "none", seed, r.ap50, r.ap5095)
                report.rows.append(row)
                mean = ShiftRow(0, "mean", seed, r.ap50, r.ap5095)
            else:
                a = min(s, cap)
                dir_rows = []
                for name, (ux, uy) in DIRECTIONS:
                    shifted = [apply_test_shift(sc, (a * ux, a * uy)) for sc in scenes]
                    r = evaluate(model, shifted, threshold=threshold, max_dets=max_dets)
                    dir_rows.append(ShiftRow(s, name, seed, r.ap50, r.ap5095, (a * ux, a * uy)))
                report.rows.extend(dir_rows)
                mean = ShiftRow(s, "mean", seed, float(np.mean([d.ap50 for d in dir_rows])),
                                float(np.mean([d.ap5095 for d in dir_rows])))
            report.rows.append(mean)
            per_seed[seed][s] = mean
            log.info("seed %s shift %d: AP50 %.4f AP50:95 %.4f", seed, s, mean.ap50, mean.ap5095)
    for s in magnitudes:
        s = int(s)
        m50, s50 = _mean_std([per_seed[sd][s].ap50 for sd in per_seed])
        m95, s95 = _mean_std([per_seed[sd][s].ap5095 for sd in per_seed])
        report.rows.append(ShiftRow(s, "mean", "mean", m50, m95))
        report.rows.append(ShiftRow(s, "mean", "std", s50, s95))
    return report


# --------------------------------------------------------------- top-k sweep

@dataclass
class TopKRow:
    k: int
    seed: int | str
    ap50: float
    ap75: float
    ap5095: float
    active_params: float


@dataclass
class TopKReport:
    rows: list[TopKRow] = field(default_factory=list)

    def csv(self) -> str:
        return _write_csv(["k", "seed", "ap50", "ap75", "ap5095", "active_params"],
                          [[r.k, r.seed, _fmt(r.ap50), _fmt(r.ap75), _fmt(r.ap5095), _fmt(r.active_params)]
                           for r in self.rows])

    def aggregate(self, k: int) -> tuple[TopKRow, TopKRow]:
        m = next(r for r in self.rows if r.k == k and r.seed == "mean")
        s = next(r for r in self.rows if r.k == k and r.seed == "std")
        return m, s

    def table(self) -> str:
        ks = sorted({r.k for r in self.rows})
        lines = ["k   AP50 (%)        AP75 (%)        AP50:95 (%)     Active Params",
                 "--  --------------  --------------  --------------  -------------"]
        for k in ks:
            m, s = self.aggregate(k)
            lines.append(f"{k:<2d}  {100 * m.ap50:6.2f} ± {100 * s.ap50:4.2f}  {100 * m.ap75:6.2f} ± {100 * s.ap75:4.2f}  "
                         f"{100 * m.ap5095:6.2f} ± {100 * s.ap5095:4.2f}  {m.active_params:13.1f}")
        return "\n".join(lines) + "\n"


def active_params(model: Detector, masks: np.ndarray) -> float:
    """Shared parameters plus the mean, over evaluated samples, of executed expert parameters."""
    per_expert = np.asarray(model.expert_param_counts(), dtype=np.float64)
    return float(model.shared_param_count() + (masks.astype(np.float64) @ per_expert).mean())


def sweep_topk(train_scenes: Sequence[SynthScene], test_scenes: Sequence[SynthScene],
               model_cfg: ModelConfig, train_cfg: TrainConfig, k_values: Sequence[int] = (1, 2, 3),
               seeds: Sequence[int] = DEFAULT_SEEDS, model_dir=None, threshold: float = 0.3,
               max_dets: int = 10) -> TopKReport:
    """Train (or load from ``model_dir``) one model per (k, seed) and evaluate it with that k."""
    report = TopKReport()
    train_data = None
    for k in k_values:
        per_seed = []
        for seed in seeds:
            ckpt = Path(model_dir) / f"k{k}_seed{seed}" if model_dir is not None else None
            if ckpt is not None and (ckpt / "config.json").exists():
                model, _ = load_checkpoint(ckpt)
            else:
                if train_data is None:
                    train_data = stack_scenes(train_scenes, model_cfg.stride)
                mcfg = ModelConfig(**{**model_cfg.to_json(), "top_k": int(k)})
                tcfg = TrainConfig(**{**train_cfg.to_json(), "seed": int(seed)})
                res = train(train_data, tcfg, mcfg)
                model = res.model
                if ckpt is not None:
                    save_checkpoint(model, tcfg, ckpt, res.loss_csv())
            r = evaluate(model, test_scenes, k=int(k), threshold=threshold, max_dets=max_dets)
            row = TopKRow(int(k), int(seed), r.ap50, r.ap75, r.ap5095, active_params(model, r.masks))
            report.rows.append(row)
            per_seed.append(row)
            log.info("k=%d seed=%d AP50 %.4f", k, seed, r.ap50)
        stats = [_mean_std([getattr(r, f) for r in per_seed]) for f in ("ap50", "ap75", "ap5095", "active_params")]
        report.rows.append(TopKRow(int(k), "mean", *(m for m, _ in stats)))
        report.rows.append(TopKRow(int(k), "std", *(s for _, s in stats)))
    return report


# ----------------------------------------------------------- routing stats

@dataclass
class RoutingReport:
    rows: list[rmoe.RoutingRow]

    def csv(self) -> str:
        return _write_csv(["scene", "N", "R_target", "w_rgb", "w_ir", "w_inter"], [r.csv_fields() for r in self.rows])

    def row(self, scene: str) -> rmoe.RoutingRow:
        return next(r for r in self.rows if r.scene == scene)

    def dark_ir_check(self) -> bool | None:
        """Whether dark scenes weight the IR expert at least as much as the RGB expert (None if no dark scenes)."""
        dark = self.row("dark")
        if dark.n == 0:
            return None
        return dark.w[1] >= dark.w[0]

    def table(self) -> str:
        lines = ["Scene      N      R_target  w_rgb   w_ir    w_inter", "---------  -----  --------  ------  ------  -------"]
        for r in self.rows:
            if r.n == 0:
                lines.append(f"{r.scene:<9s}  {0:>5d}  {'-':>8s}  {'-':>6s}  {'-':>6s}  {'-':>7s}")
                continue
            rt = "-" if r.r_target is None else f"{r.r_target:.4f}"
            lines.append(f"{r.scene:<9s}  {r.n:>5d}  {rt:>8s}  {r.w[0]:.4f}  {r.w[1]:.4f}  {r.w[2]:.4f}")
        check = self.dark_ir_check()
        verdict = "n/a (no dark scenes)" if check is None else ("PASS" if check else "FAIL")
        lines.append(f"dark-scene w_ir >= w_rgb: {verdict}")
        return "\n".join(lines) + "\n"


def dilate(mask: np.ndarray, steps: int = 1) -> np.ndarray:
    """3x3 binary dilation over the last two axes, repeated ``steps`` times."""
    m = np.asarray(mask, dtype=bool)
    for _ in range(steps):
        p = np.pad(m, [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)])
        h, w = m.shape[-2:]
        out = np.zeros_like(m)
        for dy in range(3):
            for dx in range(3):
                out |= p[..., dy:dy + h, dx:dx + w]
        m = out
    return m


def report_routing(model: Detector, scenes: Sequence[SynthScene], k: int | None = None) -> RoutingReport:
    data = stack_scenes(scenes, model.config.stride, model.dtype)
    r = evaluate(model, scenes, k=k)
    masks = dilate(data.targets.box_mask[:, 0], 1)
    rows = rmoe.routing_stats(list(r.gates), list(r.reliability[:, 0]), list(masks), data.tags)
    return RoutingReport(rows)
