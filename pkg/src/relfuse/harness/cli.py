"""Command-line entry point.

Exit codes: 0 success, 1 validation error (including bad usage), 2 IO
error, 3 numerical failure (divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from ..synthmbu import DatasetIOError, build_dataset, load_split
from ..training import CheckpointError, NumericalError, load_checkpoint, save_checkpoint, stack_scenes, train
from ..uta import ConfigError
from . import gradsuite, protocols
from .config import ConfigIOError, RunConfig, load_config

log = logging.getLogger("relfuse")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=default, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=default, help="overrides data.base_seed (generate) or train.seed")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relfuse", description="Reliability-aware RGB/IR fusion on synthetic misaligned scenes.",
                     parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    common = [_global_flags(True)]

    sub.add_parser("generate", parents=common, help="write the synthetic dataset described by the config")

    p = sub.add_parser("train", parents=common, help="train one detector and write a checkpoint")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset root written by 'generate'")

    p = sub.add_parser("eval-shift", parents=common, help="test-time RGB shift robustness sweep")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--checkpoint", action="append", required=True, metavar="DIR",
                   help="checkpoint directory; repeat once per training seed")
    p.add_argument("--magnitudes", type=int, nargs="+", metavar="PX", help="shift magnitudes in pixels")

    p = sub.add_parser("sweep-topk", parents=common, help="train/evaluate one model per (k, seed)")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--k", type=int, nargs="+", metavar="K", help="k values (default from eval.k_values)")
    p.add_argument("--seeds", type=int, nargs="+", metavar="S", help="training seeds (default from eval.seeds)")
    p.add_argument("--model-dir", metavar="DIR", help="cache of trained models, reused when present")

    p = sub.add_parser("routing-stats", parents=common, help="scene-wise routing weights on the test split")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--checkpoint", required=True, metavar="DIR")

    p = sub.add_parser("gradcheck", parents=common, help="finite-difference check of every differentiable module")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigIOError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ConfigIOError(f"cannot write {path}: {exc}") from exc


def _split(data, name):
    scenes = load_split(data, name)
    if not scenes:
        raise DatasetIOError(f"split {name!r} under {data} is empty")
    return scenes


def cmd_generate(args, cfg: RunConfig) -> int:
    manifest = cfg.manifest
    if args.seed is not None:
        manifest.base_seed = args.seed
    root = build_dataset(manifest, _out_dir(args, "data"))
    print(f"wrote {sum(manifest.counts.values())} scenes to {root}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.train.validate()
    data = stack_scenes(_split(args.data, "train"), cfg.model.stride)
    t0 = time.perf_counter()
    res = train(data, cfg.train, cfg.model, progress=args.verbose)
    out = _out_dir(args, f"runs/seed{cfg.train.seed}")
    save_checkpoint(res.model, cfg.train, out, res.loss_csv())
    print(f"trained {cfg.train.epochs} epochs in {time.perf_counter() - t0:.1f}s: "
          f"total loss {res.initial.total:.4f} -> {res.final.total:.4f}; checkpoint {out}")
    return EXIT_OK


def cmd_eval_shift(args, cfg: RunConfig) -> int:
    magnitudes = args.magnitudes if args.magnitudes is not None else cfg.eval.magnitudes
    if any(m < 0 for m in magnitudes):
        raise ConfigError(f"shift magnitudes must be nonnegative, got {magnitudes}")
    test = _split(args.data, "test")
    models = []
    for path in args.checkpoint:
        model, tcfg = load_checkpoint(path)
        models.append((tcfg.seed, model))
    report = protocols.eval_shift(models, test, magnitudes, cfg.eval.threshold, cfg.eval.max_dets)
    out = _out_dir(args, "reports")
    _write(out / "shift.csv", report.csv())
    _write(out / "shift.txt", report.table())
    print(report.table(), end="")
    return EXIT_OK


def cmd_sweep_topk(args, cfg: RunConfig) -> int:
    k_values = args.k or cfg.eval.k_values
    seeds = args.seeds or cfg.eval.seeds
    if any(k not in (1, 2, 3) for k in k_values):
        raise ConfigError(f"k values must be drawn from {{1, 2, 3}}, got {k_values}")
    train_scenes = _split(args.data, "train")
    test = _split(args.data, "test")
    report = protocols.sweep_topk(train_scenes, test, cfg.model, cfg.train, k_values, seeds, args.model_dir,
                                  cfg.eval.threshold, cfg.eval.max_dets)
    out = _out_dir(args, "reports")
    _write(out / "topk.csv", report.csv())
    _write(out / "topk.txt", report.table())
    print(report.table(), end="")
    return EXIT_OK


def cmd_routing_stats(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    report = protocols.report_routing(model, _split(args.data, "test"))
    out = _out_dir(args, "reports")
    _write(out / "routing.csv", report.csv())
    _write(out / "routing.txt", report.table())
    print(report.table(), end="")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed = gradsuite.FIXTURE_SEED if args.seed is None else args.seed
    t0 = time.perf_counter()
    reports = gradsuite.run_all(seed, args.eps)
    ok = True
    lines = []
    for name, rep in reports.items():
        status = "ok" if rep.passed(args.tol) else "FAIL"
        ok &= rep.passed(args.tol)
        lines.append(f"== {name}: worst {rep.worst:.3e} ({status}); set-stability skips {rep.skipped}")
        lines.append(rep.table())
    lines.append(f"gradcheck {'passed' if ok else 'FAILED'} (tol {args.tol:g}, eps {args.eps:g}) "
                 f"in {time.perf_counter() - t0:.1f}s")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        _write(_out_dir(args, "reports") / "gradcheck.txt", text)
    return EXIT_OK if ok else EXIT_NUMERICAL


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval-shift": cmd_eval_shift,
    "sweep-topk": cmd_sweep_topk,
    "routing-stats": cmd_routing_stats,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"relfuse: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"relfuse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DatasetIOError, CheckpointError, ConfigIOError, OSError) as exc:
        print(f"relfuse: IO error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
