"""Command-line entry point.

Subcommands: ``synth`` (generate a synthetic dataset), ``train``, ``eval``,
``predict``, and ``check`` (run the built-in verification suites).

Exit codes: 0 success, 1 usage error (bad flags, malformed config, missing
paths), 2 runtime failure, 3 check-suite failure.

Only stdlib is imported at module level so ``--threads`` can bound the BLAS
thread pool before numpy loads; ``--threads 1`` guarantees bit-reproducible
runs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mrfcount",
                     description="multi-column crowd counting toolkit")
    parser.add_argument("--threads", type=int, default=None,
                        help="bound internal numeric parallelism; "
                             "1 guarantees bit-reproducibility")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="write a synthetic dataset")
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--size", type=str, default="256",
                   help="image extent, SIDE or WIDTHxHEIGHT")
    p.add_argument("--count", type=str, default="5..30",
                   help="inclusive crowd range LO..HI")
    p.add_argument("--radius", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write per-image prediction dump")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("check", help="run built-in verification suites")
    p.add_argument("--suite", type=str, default="all",
                   help="gradients | shapes | fusion | data | all")
    p.set_defaults(func=cmd_check)
    return parser


def _load_run_config(args):
    from .config import run_config_from_text

    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = run_config_from_text(path.read_text())
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return cfg


def _echo_config(cfg):
    from .config import run_config_to_text

    print("# effective configuration")
    print(run_config_to_text(cfg), end="")
    print("# end configuration", flush=True)


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is not set in the config")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def cmd_synth(args) -> int:
    from .data import synth_generate, write_synth_dataset

    try:
        if "x" in args.size:
            ws, hs = args.size.split("x", 1)
            extent = (int(ws), int(hs))
        else:
            extent = int(args.size)
        lo, hi = (int(v) for v in args.count.split("..", 1))
    except ValueError:
        raise UsageError(
            f"bad --size {args.size!r} or --count {args.count!r}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory not writable: {out}")
    images, annotations = synth_generate(args.images, extent, (lo, hi),
                                         args.radius, args.seed)
    ann_path = write_synth_dataset(out, images, annotations)
    total = sum(a.count for a in annotations)
    print(f"wrote {len(images)} images, {total} points, annotations at {ann_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    ann = _require_file(cfg.train_annotations, "train_annotations")
    _echo_config(cfg)

    from .data import load_dataset
    from .training import train

    dataset = load_dataset(ann)
    result = train(cfg, dataset, cfg.out_dir)
    print(f"checkpoints: {result['best']} {result['final']}")
    print(f"log: {result['log']}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    ann = _require_file(cfg.eval_annotations, "eval_annotations")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    _echo_config(cfg)

    from .checkpoint import restore_model
    from .data import load_dataset
    from .evaluation import evaluate

    model, _ = restore_model(ckpt, expected_config=cfg.model)
    dataset = load_dataset(ann)
    metrics, _ = evaluate(model, dataset, batch_size=cfg.batch_size)
    print(f"images\t{metrics.images}")
    print(f"MAE\t{metrics.mae:.6f}")
    print(f"RMSE\t{metrics.rmse:.6f}")
    return 0


def cmd_predict(args) -> int:
    cfg = _load_run_config(args)
    ann = _require_file(cfg.eval_annotations, "eval_annotations")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")

    from .checkpoint import restore_model
    from .data import load_dataset
    from .evaluation import evaluate, write_prediction_dump

    model, _ = restore_model(ckpt, expected_config=cfg.model)
    dataset = load_dataset(ann)
    metrics, rows = evaluate(model, dataset, batch_size=cfg.batch_size)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump = out_dir / "predictions.tsv"
    write_prediction_dump(dump, rows, metrics)
    print(f"predictions: {dump}")
    return 0


def cmd_check(args) -> int:
    from .selfcheck import SUITES, run_suites

    names = list(SUITES) if args.suite == "all" else [args.suite]
    try:
        ok = run_suites(names)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print("all checks passed" if ok else "CHECK FAILURES", flush=True)
    return 0 if ok else 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
