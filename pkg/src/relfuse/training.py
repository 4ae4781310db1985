"""Training loop, checkpoints and batched inference."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dethead
from .model import Detector, ForwardOutput, ModelConfig, compute_losses
from .synthmbu import SynthScene
from .tensel import Tape, no_tape, rft

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ["epoch", "l_det", "l_ta", "l_uta", "total"]


class NumericalError(RuntimeError):
    pass


class CheckpointError(OSError):
    pass


@dataclass
class SceneArrays:
    """A split stacked into dense arrays with precomputed feature-grid targets."""

    rgb: np.ndarray
    ir: np.ndarray
    targets: dethead.DetTargets
    boxes: list
    tags: list[str]
    seeds: list[int]

    def __len__(self) -> int:
        return self.rgb.shape[0]


def stack_scenes(scenes: Sequence[SynthScene], stride: int = 4, dtype=np.float32) -> SceneArrays:
    if not scenes:
        raise ValueError("empty scene list")
    rgb = np.concatenate([s.rgb for s in scenes]).astype(dtype)
    ir = np.concatenate([s.ir for s in scenes]).astype(dtype)
    h, w = rgb.shape[2] // stride, rgb.shape[3] // stride
    boxes = [list(s.boxes) for s in scenes]
    targets = render_for(boxes, [s.true_shift for s in scenes], h, w, stride, dtype)
    return SceneArrays(rgb, ir, targets, boxes, [s.scene_tag for s in scenes], [s.seed for s in scenes])


def render_for(boxes, shifts, h, w, stride, dtype):
    return dethead.render_targets(boxes, shifts, h, w, stride, dtype=dtype)


def _loss_row(epoch: int, parts: dethead.LossBreakdown) -> list[str]:
    return [str(epoch)] + [repr(float(x)) for x in (parts.l_det, parts.l_ta, parts.l_uta, parts.total)]


def evaluate_loss(model: Detector, data: SceneArrays, cfg: dethead.TrainConfig, batch: int = 100):
    """Dataset-mean loss parts without recording a tape."""
    acc = np.zeros(3)
    n = len(data)
    with no_tape():
        for lo in range(0, n, batch):
            rows = np.arange(lo, min(lo + batch, n))
            out = model(data.rgb[rows], data.ir[rows])
            _, parts = compute_losses(out, data.targets.take(rows), cfg.alpha, cfg.beta)
            acc += np.array([parts.l_det, parts.l_ta, parts.l_uta]) * rows.size
    acc /= n
    return dethead.total_loss(*acc, cfg.alpha, cfg.beta)[1]


@dataclass
class TrainResult:
    model: Detector
    log_rows: list[list[str]]
    initial: dethead.LossBreakdown
    final: dethead.LossBreakdown

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOSS_LOG_HEADER)
        w.writerows(self.log_rows)
        return buf.getvalue()


def train(data: SceneArrays, cfg: dethead.TrainConfig, model_cfg: ModelConfig | None = None,
          dtype=np.float32, progress: bool = False) -> TrainResult:
    """Adam over shuffled mini-batches.

    Row 0 of the log is the dataset-mean loss at initialisation; rows
    1..epochs are per-epoch means of the mini-batch losses.
    """
    cfg.validate()
    if len(data) == 0:
        raise ValueError("training set is empty")
    model = Detector(model_cfg, seed=cfg.seed, dtype=dtype, lam=cfg.lam, eps=cfg.epsilon)
    opt = dethead.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 7919)
    initial = evaluate_loss(model, data, cfg)
    rows = [_loss_row(0, initial)]
    final = initial
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        acc = np.zeros(3)
        for lo in range(0, n, cfg.batch):
            idx = perm[lo:lo + cfg.batch]
            opt.zero_grad()
            with Tape() as tape:
                out = model(data.rgb[idx], data.ir[idx])
                total, parts = compute_losses(out, data.targets.take(idx), cfg.alpha, cfg.beta)
                if not math.isfinite(parts.total):
                    raise NumericalError(f"training diverged at epoch {epoch}: total loss {parts.total}")
                tape.backward(total)
            opt.step()
            acc += np.array([parts.l_det, parts.l_ta, parts.l_uta]) * idx.size
        final = dethead.total_loss(*(acc / n), cfg.alpha, cfg.beta)[1]
        rows.append(_loss_row(epoch, final))
        if progress:
            log.info("epoch %d total %.4f (det %.4f ta %.4f uta %.4f)",
                     epoch, final.total, final.l_det, final.l_ta, final.l_uta)
    return TrainResult(model, rows, initial, final)


def save_checkpoint(model: Detector, cfg: dethead.TrainConfig, path, loss_csv: str | None = None) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        for p in model.parameters():
            rft.save(path / f"{p.name}.rft", p.data)
        meta = {"model": model.config.to_json(), "train": cfg.to_json(), "dtype": model.dtype.name}
        (path / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        if loss_csv is not None:
            (path / "loss_log.csv").write_text(loss_csv)
    except OSError as exc:
        raise CheckpointError(f"writing checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> tuple[Detector, dethead.TrainConfig]:
    path = Path(path)
    try:
        meta = json.loads((path / "config.json").read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    mcfg = ModelConfig(**meta["model"])
    tcfg = dethead.TrainConfig(**meta["train"])
    model = Detector(mcfg, seed=tcfg.seed, dtype=np.dtype(meta.get("dtype", "float32")),
                     lam=tcfg.lam, eps=tcfg.epsilon)
    for p in model.parameters():
        f = path / f"{p.name}.rft"
        try:
            arr = rft.load(f)
        except OSError as exc:
            raise CheckpointError(f"missing parameter file {f}: {exc}") from exc
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{f}: dims {arr.shape} do not match {p.data.shape}")
        p.data[...] = arr
    return model, tcfg


def predict(model: Detector, rgb: np.ndarray, ir: np.ndarray, k: int | None = None,
            batch: int = 100) -> list[ForwardOutput]:
    outs = []
    with no_tape():
        for lo in range(0, rgb.shape[0], batch):
            outs.append(model(rgb[lo:lo + batch], ir[lo:lo + batch], k))
    return outs
