"""Heatmap decoding and COCO-style average precision."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..dethead import HEAT_SIGMA, to_image

log = logging.getLogger(__name__)

IOU_THRESHOLDS = np.round(np.arange(0.50, 0.951, 0.05), 2)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    confidence: float


def _is_peak(hm: np.ndarray) -> np.ndarray:
    """Local maxima over 3x3: strictly above earlier (row, col) neighbours, >= later ones."""
    h, w = hm.shape
    pad = np.pad(hm, 1, constant_values=-np.inf)
    peak = np.ones_like(hm, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            peak &= (hm > nb) if (dy, dx) < (0, 0) else (hm >= nb)
    return peak


def decode(heatmap: np.ndarray, sizes: np.ndarray, threshold: float = 0.3, max_dets: int = 10,
           stride: int = 4, refine: bool = True) -> list[Detection]:
    """Detections for one image from a (H, W) center map and (2, H, W) size map.

    With ``refine`` the peak is moved by sigma^2/2 * log(right/left) along each
    axis (clipped to half a cell), which is exact when the map around the
    peak is the Gaussian used for training targets.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    h, w = hm.shape
    rr, cc = np.nonzero(_is_peak(hm) & (hm >= threshold))
    order = np.lexsort((cc, rr, -hm[rr, cc]))[:max_dets]
    dets = []
    for i in order:
        r, c = int(rr[i]), int(cc[i])
        du = dv = 0.0
        if refine:
            if 0 < c < w - 1 and hm[r, c - 1] > 0 and hm[r, c + 1] > 0:
                du = float(np.clip(HEAT_SIGMA ** 2 / 2 * np.log(hm[r, c + 1] / hm[r, c - 1]), -0.5, 0.5))
            if 0 < r < h - 1 and hm[r - 1, c] > 0 and hm[r + 1, c] > 0:
                dv = float(np.clip(HEAT_SIGMA ** 2 / 2 * np.log(hm[r + 1, c] / hm[r - 1, c]), -0.5, 0.5))
        cx = float(to_image(c + du, stride))
        cy = float(to_image(r + dv, stride))
        bw = max(float(sizes[0, r, c]), 0.0) * stride
        bh = max(float(sizes[1, r, c]), 0.0) * stride
        dets.append(Detection((cx, cy, bw, bh), float(np.clip(hm[r, c], 0.0, 1.0))))
    return dets


def iou(a, b) -> float:
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _ranked(dets: Sequence[Sequence[Detection]]) -> list[tuple[int, Detection]]:
    flat = [(i, d) for i, ds in enumerate(dets) for d in ds]
    flat.sort(key=lambda t: (-t[1].confidence, t[0], t[1].box))
    return flat


def match(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[tuple]], iou_threshold: float) -> np.ndarray:
    """Greedy confidence-descending matching; returns the TP flag of each ranked detection."""
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = []
    for img, d in _ranked(dets):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts[img]):
            if used[img][j]:
                continue
            o = iou(d.box, g)
            if o > best:
                best, best_j = o, j
        hit = best_j >= 0 and best >= iou_threshold
        if hit:
            used[img][best_j] = True
        tp.append(hit)
    return np.asarray(tp, dtype=bool)


def average_precision(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[tuple]],
                      iou_threshold: float = 0.5) -> float:
    """All-point interpolated area under the precision/recall curve.

    No ground truth and no detections gives 1.0 (logged as degenerate); no
    ground truth with detections gives 0.0.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"IoU threshold must lie in (0, 1), got {iou_threshold}")
    n_gt = sum(len(g) for g in gts)
    n_det = sum(len(d) for d in dets)
    if n_gt == 0:
        if n_det == 0:
            log.warning("average_precision: no ground truth and no detections, AP defined as 1.0")
            return 1.0
        return 0.0
    tp = match(dets, gts, iou_threshold)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def ap_summary(dets, gts) -> dict[str, float]:
    aps = {float(t): average_precision(dets, gts, float(t)) for t in IOU_THRESHOLDS}
    return {"ap50": aps[0.5], "ap75": aps[0.75], "ap5095": float(np.mean(list(aps.values())))}
