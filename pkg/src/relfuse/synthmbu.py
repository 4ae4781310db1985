"""Synthetic misaligned RGB/IR scenes with known shift, boxes and scene tag.

Infrared frames carry bright Gaussian targets over smooth thermal clutter.
Visible frames carry the same targets, textured and tinted, displaced by the
scene's true shift and degraded according to the scene tag.  Every scene is
a pure function of its seed and the generator config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensel import rft
from .uta import ConfigError

GENERATOR_VERSION = "synthmbu-1"
TAGS = ("daytime", "dark", "backlight")
SPLITS = ("train", "val", "test")
_SPLIT_OFFSET = {"train": 0, "val": 1_000_000, "test": 2_000_000}


@dataclass(frozen=True)
class GeneratorConfig:
    size: int = 64
    channels: int = 3
    min_targets: int = 1
    max_targets: int = 3
    shift_range: float = 8.0
    box_min: int = 8
    box_max: int = 14
    tag_mix: tuple[float, float, float] = (0.85, 0.12, 0.03)
    ir_amplitude: float = 1.0
    rgb_amplitude: float = 0.8
    clutter_amplitude: float = 0.12
    dark_contrast: float = 0.15
    dark_noise: float = 0.05

    def validate(self) -> None:
        if self.size < 32:
            raise ConfigError(f"image size must be >= 32, got {self.size}")
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if not 1 <= self.min_targets <= self.max_targets <= 3:
            raise ConfigError(f"target count range must lie in [1, 3], got {self.min_targets}..{self.max_targets}")
        if not 0 <= self.shift_range <= self.size / 4:
            raise ConfigError(f"shift range must be within [0, {self.size / 4}], got {self.shift_range}")
        if not 2 <= self.box_min <= self.box_max <= self.size // 4:
            raise ConfigError(f"box size range {self.box_min}..{self.box_max} invalid for {self.size}px images")
        mix = np.asarray(self.tag_mix, dtype=float)
        if mix.shape != (3,) or (mix < 0).any() or not np.isclose(mix.sum(), 1.0):
            raise ConfigError(f"tag_mix must be 3 nonnegative weights summing to 1, got {self.tag_mix}")

    @property
    def shift_cap(self) -> int:
        return self.size // 4


@dataclass
class SynthScene:
    rgb: np.ndarray
    ir: np.ndarray
    true_shift: np.ndarray
    boxes: list[tuple[float, float, float, float]]
    scene_tag: str
    seed: int

    def metadata(self, split: str) -> dict:
        return {
            "seed": int(self.seed),
            "tag": self.scene_tag,
            "shift": [float(self.true_shift[0]), float(self.true_shift[1])],
            "boxes": [[float(v) for v in b] for b in self.boxes],
            "split": split,
        }


def _clutter(rng: np.random.Generator, size: int, amp: float, waves: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    for _ in range(waves):
        period = rng.uniform(24.0, 64.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    return amp * out / waves


def _blob(size: int, cx: float, cy: float, w: float, h: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.exp(-0.5 * (((xx - cx) / (w / 4.0)) ** 2 + ((yy - cy) / (h / 4.0)) ** 2))


def _place_targets(rng: np.random.Generator, cfg: GeneratorConfig, count: int):
    boxes: list[tuple[float, float, float, float]] = []
    for _ in range(200):
        if len(boxes) == count:
            break
        w = int(rng.integers(cfg.box_min, cfg.box_max + 1))
        h = int(rng.integers(cfg.box_min, cfg.box_max + 1))
        cx = int(rng.integers(int(np.ceil(w / 2)), cfg.size - int(np.ceil(w / 2)) + 1))
        cy = int(rng.integers(int(np.ceil(h / 2)), cfg.size - int(np.ceil(h / 2)) + 1))
        if all(abs(cx - b[0]) >= (w + b[2]) / 2 + 2 or abs(cy - b[1]) >= (h + b[3]) / 2 + 2 for b in boxes):
            boxes.append((float(cx), float(cy), float(w), float(h)))
    return boxes


def generate_scene(seed: int, config: GeneratorConfig | None = None, tag: str | None = None) -> SynthScene:
    """Render one scene pair.

    Box centers sit on integer pixel coordinates of the infrared frame (pixel
    j is centred at x = j).  The visible target centers are the infrared ones
    plus ``true_shift``.
    """
    cfg = config or GeneratorConfig()
    cfg.validate()
    if tag is not None and tag not in TAGS:
        raise ConfigError(f"unknown scene tag {tag!r}")
    rng = np.random.default_rng(np.uint64(seed))
    drawn_tag = TAGS[int(rng.choice(3, p=np.asarray(cfg.tag_mix)))]
    tag = tag or drawn_tag
    s = cfg.size
    shift = rng.uniform(-cfg.shift_range, cfg.shift_range, size=2) if cfg.shift_range > 0 else np.zeros(2)
    count = int(rng.integers(cfg.min_targets, cfg.max_targets + 1))
    boxes = _place_targets(rng, cfg, count)

    ir = 0.25 + _clutter(rng, s, cfg.clutter_amplitude)
    for cx, cy, w, h in boxes:
        ir = ir + cfg.ir_amplitude * _blob(s, cx, cy, w, h)

    sky = np.linspace(0.55, 0.35, s)[:, None] + _clutter(rng, s, 0.08)
    tint = rng.uniform(0.6, 1.0, size=cfg.channels)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    target = np.zeros((s, s))
    for cx, cy, w, h in boxes:
        rx, ry = cx + shift[0], cy + shift[1]
        texture = 0.75 + 0.25 * np.cos(2 * np.pi * (xx - rx) / 3.0) * np.cos(2 * np.pi * (yy - ry) / 3.0)
        target = target + cfg.rgb_amplitude * texture * _blob(s, rx, ry, w, h)
    contrast, noise = 1.0, 0.02
    if tag == "dark":
        contrast, noise = cfg.dark_contrast, cfg.dark_noise
        sky = 0.15 * sky
    rgb = np.empty((cfg.channels, s, s))
    for ch in range(cfg.channels):
        rgb[ch] = sky * (0.8 + 0.2 * ch / max(cfg.channels - 1, 1)) + contrast * tint[ch] * target
    if tag == "backlight" and boxes:
        cx, cy = boxes[0][0] + shift[0], boxes[0][1] + shift[1]
        px, py = cx + rng.uniform(-3, 3), cy + rng.uniform(-3, 3)
        patch = np.exp(-0.5 * ((xx - px) ** 2 + (yy - py) ** 2) / 8.0 ** 2)
        rgb = rgb * (1 - patch) + 1.5 * patch
    rgb = rgb + noise * rng.standard_normal(rgb.shape)

    ir3 = np.broadcast_to(ir, (cfg.channels, s, s))
    return SynthScene(
        rgb=rgb[None].astype(np.float32),
        ir=np.ascontiguousarray(ir3[None]).astype(np.float32),
        true_shift=np.asarray(shift, dtype=np.float64),
        boxes=boxes,
        scene_tag=tag,
        seed=int(seed),
    )


def translate(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate the last two axes by (dx, dy) pixels with zero fill."""
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    ys = slice(max(dy, 0), h + min(dy, 0))
    yd = slice(max(-dy, 0), h + min(-dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    xd = slice(max(-dx, 0), w + min(-dx, 0))
    out[..., ys, xs] = img[..., yd, xd]
    return out


def apply_test_shift(scene: SynthScene, shift) -> SynthScene:
    """Move the visible frame only; infrared, labels and tag stay as they are."""
    dx, dy = (int(v) for v in shift)
    h, w = scene.rgb.shape[-2:]
    if abs(dx) > w or abs(dy) > h:
        raise ConfigError(f"test shift {shift} exceeds the image size {w}x{h}")
    if dx == 0 and dy == 0:
        return scene
    return replace(scene, rgb=translate(scene.rgb, dx, dy),
                   true_shift=scene.true_shift + np.array([dx, dy], dtype=np.float64))


@dataclass
class DatasetManifest:
    counts: dict[str, int] = field(default_factory=lambda: {"train": 500, "val": 200, "test": 300})
    base_seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    version: str = GENERATOR_VERSION

    def seeds(self, split: str) -> list[int]:
        start = self.base_seed + _SPLIT_OFFSET[split]
        return list(range(start, start + self.counts.get(split, 0)))

    def validate(self) -> None:
        self.generator.validate()
        for split, n in self.counts.items():
            if split not in SPLITS:
                raise ConfigError(f"unknown split {split!r}")
            if not 0 <= n < 1_000_000:
                raise ConfigError(f"split {split} count {n} out of range")

    def to_json(self) -> dict:
        gen = asdict(self.generator)
        gen["tag_mix"] = list(gen["tag_mix"])
        return {"counts": dict(self.counts), "base_seed": self.base_seed, "generator": gen, "version": self.version,
                "shift_distribution": {"kind": "uniform", "low": -self.generator.shift_range,
                                       "high": self.generator.shift_range}}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        gen = dict(obj.get("generator", {}))
        if "tag_mix" in gen:
            gen["tag_mix"] = tuple(gen["tag_mix"])
        return cls(counts={k: int(v) for k, v in obj["counts"].items()}, base_seed=int(obj.get("base_seed", 0)),
                   generator=GeneratorConfig(**gen), version=obj.get("version", GENERATOR_VERSION))


class DatasetIOError(OSError):
    pass


def build_dataset(manifest: DatasetManifest, root) -> Path:
    """Write every split as RFT1 image pairs plus one metadata.jsonl."""
    manifest.validate()
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
        with open(root / "metadata.jsonl", "w") as meta:
            for split in SPLITS:
                if not manifest.counts.get(split):
                    continue
                (root / split).mkdir(exist_ok=True)
                for seed in manifest.seeds(split):
                    sc = generate_scene(seed, manifest.generator)
                    rft.save(root / split / f"{seed}.rgb.rft", sc.rgb)
                    rft.save(root / split / f"{seed}.ir.rft", sc.ir)
                    meta.write(json.dumps(sc.metadata(split), sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetIOError(f"writing dataset under {root}: {exc}") from exc
    return root


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    try:
        return DatasetManifest.from_json(json.loads(path.read_text()))
    except OSError as exc:
        raise DatasetIOError(f"cannot read manifest {path}: {exc}") from exc


def load_split(root, split: str) -> list[SynthScene]:
    root = Path(root)
    meta_path = root / "metadata.jsonl"
    scenes = []
    try:
        with open(meta_path) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["split"] != split:
                    continue
                seed = rec["seed"]
                scenes.append(SynthScene(
                    rgb=rft.load(root / split / f"{seed}.rgb.rft"),
                    ir=rft.load(root / split / f"{seed}.ir.rft"),
                    true_shift=np.asarray(rec["shift"], dtype=np.float64),
                    boxes=[tuple(b) for b in rec["boxes"]],
                    scene_tag=rec["tag"],
                    seed=seed,
                ))
    except OSError as exc:
        raise DatasetIOError(f"reading split {split!r} from {root}: {exc}") from exc
    return scenes
