"""Reliability-guided sparse mixture-of-experts fusion.

The reliability map scales the aligned visible half of the router input, an
image-level router produces a probability vector over three experts, the
top-k experts run and their probabilities are renormalised over the
selected set.  Selection is treated as a constant in the backward pass.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensel import Parameter, ShapeError, Tensor, emit, ops
from .tensel.layers import Conv
from .uta import ConfigError

EXPERT_NAMES = ("rgb", "ir", "inter")
SCENE_TAGS = ("daytime", "dark", "backlight")


@dataclass
class GateVector:
    probs: np.ndarray
    logits: np.ndarray


@dataclass
class ExpertSelection:
    indices: tuple[int, ...]
    weights: np.ndarray


def router_input(f_ir: Tensor, aligned: Tensor, reliability: Tensor) -> Tensor:
    if f_ir.dims != aligned.dims:
        raise ShapeError(f"router_input: dims differ, {f_ir.dims} vs {aligned.dims}")
    n, _, h, w = f_ir.dims
    if reliability.dims != (n, 1, h, w):
        raise ShapeError(f"router_input: reliability dims {reliability.dims}, expected ({n}, 1, {h}, {w})")
    return ops.concat_channels(f_ir, ops.mul(aligned, reliability))


class Router:
    """Global average pool -> 1x1 linear map to expert logits -> softmax."""

    def __init__(self, in_channels: int, num_experts: int, rng: np.random.Generator,
                 dtype=np.float64, zero: bool = False, name: str = "rmoe.router"):
        self.linear = Conv(name, in_channels, num_experts, 1, rng, dtype, zero=zero)

    def __call__(self, f_in: Tensor) -> tuple[Tensor, Tensor]:
        logits = self.linear(ops.global_avg_pool(f_in))
        return logits, ops.softmax(logits)

    def parameters(self) -> list[Parameter]:
        return self.linear.parameters()


def gate(f_in: Tensor, router: Router) -> list[GateVector]:
    logits, probs = router(f_in)
    return [GateVector(p[:, 0, 0].copy(), l[:, 0, 0].copy()) for p, l in zip(probs.data, logits.data)]


def select_topk(g, k: int) -> ExpertSelection:
    """Keep the k largest probabilities (lowest index wins ties) and renormalise."""
    probs = np.asarray(g.probs if isinstance(g, GateVector) else g, dtype=np.float64)
    e = probs.size
    if not 1 <= k <= e:
        raise ConfigError(f"top_k must be in [1, {e}], got {k}")
    if k == e:
        return ExpertSelection(tuple(range(e)), probs.copy())
    order = np.argsort(-probs, kind="stable")[:k]
    idx = tuple(sorted(int(i) for i in order))
    chosen = probs[list(idx)]
    return ExpertSelection(idx, chosen / chosen.sum())


def selection_mask(probs: np.ndarray, k: int) -> np.ndarray:
    """(N, E) boolean mask of the top-k experts per sample."""
    n, e = probs.shape
    if not 1 <= k <= e:
        raise ConfigError(f"top_k must be in [1, {e}], got {k}")
    mask = np.zeros((n, e), dtype=bool)
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def renormalize(probs: Tensor, mask: np.ndarray) -> Tensor:
    """Restrict (N, E, 1, 1) probabilities to the masked set and rescale to sum 1."""
    m = np.asarray(mask, dtype=bool).reshape(probs.dims)
    if m.all():
        return emit(probs.data.copy(), (probs,), lambda g: (g,))
    mf = m.astype(probs.dtype)
    s = (probs.data * mf).sum(axis=1, keepdims=True)
    out = probs.data * mf / s

    def back(g):
        return (mf / s * (g - (g * out).sum(axis=1, keepdims=True)),)

    return emit(out, (probs,), back)


class Expert:
    """A conv over a channel window [lo, hi) of the router input."""

    def __init__(self, name: str, lo: int, hi: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.name = name
        self.lo, self.hi = lo, hi
        self.conv = Conv(f"rmoe.expert_{name}", hi - lo, out_channels, kernel, rng, dtype)
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, f_in: Tensor) -> Tensor:
        with self._lock:
            self.calls += f_in.dims[0]
        x = f_in if (self.lo, self.hi) == (0, f_in.dims[1]) else ops.slice_channels(f_in, self.lo, self.hi)
        return self.conv(x)

    def parameters(self) -> list[Parameter]:
        return self.conv.parameters()

    @property
    def num_params(self) -> int:
        return self.conv.num_params


class ExpertPool:
    """RGB-dominant (1x1 on the modulated visible half), IR-dominant (1x1 on the
    infrared half) and interactive (3x3 over both halves) experts."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        c = channels
        self.experts = [
            Expert("rgb", c, 2 * c, c, 1, rng, dtype),
            Expert("ir", 0, c, c, 1, rng, dtype),
            Expert("inter", 0, 2 * c, c, 3, rng, dtype),
        ]

    def __len__(self) -> int:
        return len(self.experts)

    def __iter__(self):
        return iter(self.experts)

    def __getitem__(self, i: int) -> Expert:
        return self.experts[i]

    def reset_counters(self) -> None:
        for e in self.experts:
            e.calls = 0

    @property
    def counters(self) -> list[int]:
        return [e.calls for e in self.experts]

    def parameters(self) -> list[Parameter]:
        return [p for e in self.experts for p in e.parameters()]


@dataclass
class FusionOutput:
    fused: Tensor
    weights: Tensor
    mask: np.ndarray
    selections: list[ExpertSelection] = field(default_factory=list)

    def key(self) -> tuple:
        return tuple(map(tuple, self.mask.tolist()))


def fuse(f_in: Tensor, probs: Tensor, k: int, pool: ExpertPool, order: Sequence[int] | None = None) -> FusionOutput:
    """Sum of renormalised weight times expert output over each sample's top-k set.

    An expert runs only on the batch rows that selected it; rows that did
    not select it receive neither its output nor any of its gradient.
    """
    n, e = probs.dims[:2]
    if e != len(pool):
        raise ShapeError(f"fuse: {e} gate entries for {len(pool)} experts")
    mask = selection_mask(probs.data[:, :, 0, 0], k)
    weights = renormalize(probs, mask[:, :, None, None])
    out = None
    for i in (order if order is not None else range(e)):
        rows = np.flatnonzero(mask[:, i])
        if rows.size == 0:
            continue
        w_i = ops.slice_channels(weights, i, i + 1)
        if rows.size == n:
            y = ops.mul(pool[i](f_in), w_i)
        else:
            y = ops.mul(pool[i](ops.take_batch(f_in, rows)), ops.take_batch(w_i, rows))
            y = ops.scatter_batch(y, rows, n)
        out = y if out is None else ops.add(out, y)
    sel = [ExpertSelection(tuple(int(j) for j in np.flatnonzero(m)), weights.data[s, m, 0, 0].astype(np.float64))
           for s, m in enumerate(mask)]
    return FusionOutput(out, weights, mask, sel)


class SparseMoEFusion:
    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64,
                 top_k: int = 3, num_experts: int = 3):
        if num_experts != 3:
            raise ConfigError(f"rmoe.num_experts must be 3 (rgb, ir, inter), got {num_experts}")
        if not 1 <= top_k <= num_experts:
            raise ConfigError(f"rmoe.top_k must be in [1, {num_experts}], got {top_k}")
        self.router = Router(2 * channels, num_experts, rng, dtype)
        self.pool = ExpertPool(channels, rng, dtype)
        self.top_k = top_k

    def __call__(self, f_ir: Tensor, aligned: Tensor, reliability: Tensor, k: int | None = None):
        f_in = router_input(f_ir, aligned, reliability)
        logits, probs = self.router(f_in)
        out = fuse(f_in, probs, self.top_k if k is None else k, self.pool)
        return f_in, logits, probs, out

    def parameters(self) -> list[Parameter]:
        return self.router.parameters() + self.pool.parameters()


@dataclass
class RoutingRow:
    scene: str
    n: int
    r_target: float | None
    w: tuple[float, ...] | None

    def csv_fields(self) -> list[str]:
        if self.n == 0:
            return [self.scene, "0", "", "", "", ""]
        r = "" if self.r_target is None else repr(float(self.r_target))
        return [self.scene, str(self.n), r] + [repr(float(x)) for x in self.w]


def routing_stats(gates: Iterable, reliabilities: Iterable, target_masks: Iterable, tags: Iterable[str],
                  groups: Sequence[str] = SCENE_TAGS) -> list[RoutingRow]:
    """Per scene group: sample count, mean gate weights, and mean target-region reliability.

    R_target averages the per-sample mean of R inside its target mask;
    samples with an empty mask do not contribute to it.
    """
    bucket: dict[str, list[tuple[np.ndarray, float | None]]] = {t: [] for t in groups}
    for g, r, m, tag in zip(gates, reliabilities, target_masks, tags):
        probs = np.asarray(g.probs if isinstance(g, GateVector) else g, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64).reshape(-1)
        m = np.asarray(m, dtype=bool).reshape(-1)
        rt = float(r[m].mean()) if m.any() else None
        bucket.setdefault(tag, []).append((probs, rt))
    rows = []
    for tag, items in bucket.items():
        if not items:
            rows.append(RoutingRow(tag, 0, None, None))
            continue
        w = np.mean([p for p, _ in items], axis=0)
        rts = [rt for _, rt in items if rt is not None]
        rows.append(RoutingRow(tag, len(items), float(np.mean(rts)) if rts else None, tuple(float(x) for x in w)))
    return rows
