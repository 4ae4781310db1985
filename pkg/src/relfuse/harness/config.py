"""Flat ``key = value`` run configuration.

Lines are UTF-8 ``key = value`` pairs; ``#`` starts a comment. Keys are
namespaced by module (``uta.lambda``, ``rmoe.top_k``, ``train.lr`` ...);
unknown keys and malformed values are validation errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from ..dethead import TrainConfig
from ..model import ModelConfig
from ..synthmbu import DatasetManifest, GeneratorConfig
from ..uta import ConfigError


class ConfigIOError(OSError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _opt_float(text: str) -> float | None:
    return None if text.lower() in ("none", "") else float(text)


# key -> (section, attribute, parser)
KEYS = {
    "uta.lambda": ("train", "lam", float),
    "uta.epsilon": ("train", "epsilon", float),
    "uta.offset_clamp": ("model", "offset_clamp", _opt_float),
    "rmoe.top_k": ("model", "top_k", int),
    "rmoe.num_experts": ("model", "num_experts", int),
    "model.channels": ("model", "channels", int),
    "train.alpha": ("train", "alpha", float),
    "train.beta": ("train", "beta", float),
    "train.lr": ("train", "lr", float),
    "train.epochs": ("train", "epochs", int),
    "train.batch": ("train", "batch", int),
    "train.seed": ("train", "seed", int),
    "data.train": ("counts", "train", int),
    "data.val": ("counts", "val", int),
    "data.test": ("counts", "test", int),
    "data.base_seed": ("data", "base_seed", int),
    "data.size": ("generator", "size", int),
    "data.shift_range": ("generator", "shift_range", float),
    "data.max_targets": ("generator", "max_targets", int),
    "eval.magnitudes": ("eval", "magnitudes", _ints),
    "eval.seeds": ("eval", "seeds", _ints),
    "eval.k_values": ("eval", "k_values", _ints),
    "eval.threshold": ("eval", "threshold", float),
    "eval.max_dets": ("eval", "max_dets", int),
}


@dataclass
class EvalConfig:
    magnitudes: tuple[int, ...] = (0, 5, 10, 20, 40)
    seeds: tuple[int, ...] = (0, 1, 2)
    k_values: tuple[int, ...] = (1, 2, 3)
    threshold: float = 0.3
    max_dets: int = 10

    def validate(self) -> None:
        if any(m < 0 for m in self.magnitudes):
            raise ConfigError(f"eval.magnitudes must be nonnegative, got {self.magnitudes}")
        if not self.seeds:
            raise ConfigError("eval.seeds must not be empty")
        if any(k not in (1, 2, 3) for k in self.k_values):
            raise ConfigError(f"eval.k_values must be drawn from {{1, 2, 3}}, got {self.k_values}")
        if not 0 <= self.threshold <= 1 or self.max_dets < 1:
            raise ConfigError(f"invalid eval.threshold/max_dets: {self.threshold}/{self.max_dets}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: DatasetManifest = field(default_factory=DatasetManifest)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.manifest.validate()
        self.eval.validate()
        if self.train.lam <= 0 or self.train.epsilon <= 0:
            raise ConfigError(f"uta.lambda and uta.epsilon must be positive, got {self.train.lam}, {self.train.epsilon}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict] = {s: {} for s in ("model", "train", "counts", "data", "generator", "eval")}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section, attr, conv = KEYS[key]
        try:
            values[section][attr] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from exc

    base = DatasetManifest()
    manifest = DatasetManifest(counts={**base.counts, **values["counts"]},
                               base_seed=values["data"].get("base_seed", 0),
                               generator=replace(GeneratorConfig(), **values["generator"]))
    cfg = RunConfig(ModelConfig(**values["model"]), TrainConfig(**values["train"]), manifest,
                    EvalConfig(**values["eval"]))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigIOError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
