"""Command-line entry point: ``emloc <subcommand> ...``.

Every subcommand is a pure function of its input files and flags. Failures
print a single ``error kind=<kind> msg=<json string>`` line on stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from ..correction import StructureError, correct_network
from ..emulator import build_emulator
from ..linalg import LinalgError
from ..model import TapeError, attach_lora, merge_network
from ..train import TrainConfig, evaluate, finetune
from .config import ConfigError, dump_config, load_config
from .experiment import StageError, run_experiment, sweep_calib, sweep_lambda, write_curve_csv
from .formats import CRCError, FormatError, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .tasks import generate_task

__all__ = ["main", "build_parser", "CliError"]

EXIT_CODES = {"usage": 2, "missing_file": 3, "crc": 4, "format": 4, "config": 5, "stage": 6, "value": 7}


class CliError(Exception):
    def __init__(self, kind: str, msg: str, **extra):
        super().__init__(msg)
        self.kind, self.msg, self.extra = kind, msg, extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _csv_floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty value list")
    return vals


def _csv_ints(text: str) -> list[int]:
    vals = _csv_floats(text)
    if any(v != int(v) or v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return [int(v) for v in vals]


def _nonneg(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _count(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"no such file: {path}")
    return p


def cmd_generate(args) -> int:
    cfg = load_config(_existing(args.config))
    task = generate_task(args.seed, cfg.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": args.seed, "role": "base"}
    save_checkpoint(out / "base.ckpt", task.base, meta)
    save_checkpoint(out / "teacher.ckpt", task.teacher, {**meta, "role": "teacher"})
    for split in ("train", "eval", "calib"):
        save_dataset(out / f"{split}.data", getattr(task, split))
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    print(f"wrote {out}")
    return 0


def cmd_compress(args) -> int:
    net, meta = load_checkpoint(_existing(args.model))
    if net.loras():
        raise CliError("value", "compress expects a model without adapters")
    calib = load_dataset(_existing(args.calib))
    emu = build_emulator(net, calib, args.ratio)
    save_checkpoint(args.out, emu, {**meta, "role": "emulator", "ratio": args.ratio})
    return 0


def cmd_finetune(args) -> int:
    net, meta = load_checkpoint(_existing(args.model))
    data = load_dataset(_existing(args.data))
    if net.loras():
        raise CliError("value", "model already carries adapters; merge them first")
    cfg = TrainConfig(lr=args.lr, iterations=args.iters, batch_size=args.batch_size,
                      lora_rank=args.rank, seed=args.seed, schedule=args.schedule)
    trained, curve = finetune(attach_lora(net, args.rank, args.seed), data, cfg)
    save_checkpoint(args.out, trained, {**meta, "rank": args.rank, "seed": args.seed})
    if args.curve:
        with open(args.curve, "w", encoding="utf-8", newline="") as fh:
            write_curve_csv(curve, fh)
    print(f"final_batch_loss={curve[-1].loss!r}")
    return 0


def cmd_correct(args) -> int:
    full, meta = load_checkpoint(_existing(args.full))
    emu, _ = load_checkpoint(_existing(args.emulator))
    corrected, report = correct_network(emu, full, args.lam)
    save_checkpoint(args.out, corrected, {**meta, "role": "corrected", "lambda": args.lam})
    Path(args.report).write_text(report.to_text(), encoding="utf-8")
    return 0


def cmd_merge(args) -> int:
    net, meta = load_checkpoint(_existing(args.model))
    save_checkpoint(args.out, merge_network(net), {**meta, "merged": True})
    return 0


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(_existing(args.model))
    data = load_dataset(_existing(args.data))
    metrics = evaluate(net, data)
    print(" ".join(f"{k}={v!r}" for k, v in metrics.items()))
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(_existing(args.config))
    if args.parallel:
        cfg = cfg.replace(parallel=True)
    report = run_experiment(cfg)
    report.write(args.out, figures=not args.no_figures)
    sys.stdout.write(report.to_table())
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = load_config(_existing(args.config))
    sweep = sweep_lambda(cfg, args.values)
    if args.out:
        sweep.write(args.out, figures=not args.no_figures)
    sys.stdout.write(sweep.to_csv())
    return 0


def cmd_sweep_calib(args) -> int:
    cfg = load_config(_existing(args.config))
    sweep = sweep_calib(cfg, args.values)
    if args.out:
        sweep.write(args.out, figures=not args.no_figures)
    sys.stdout.write(sweep.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emloc", description="Fine-tune through a low-rank emulator, then transfer the adapters.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic task (base model and data splits)")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("compress", help="build an emulator from a model and calibration data")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--ratio", type=_positive, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("finetune", help="attach and train LoRA adapters")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rank", type=_count, required=True)
    p.add_argument("--lr", type=_nonneg, required=True)
    p.add_argument("--iters", type=_count, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=_count, default=TrainConfig.batch_size)
    p.add_argument("--schedule", choices=("cosine", "constant"), default=TrainConfig.schedule)
    p.add_argument("--curve", help="write step,lr,loss CSV here")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("correct", help="correct emulator adapters for the full model")
    p.add_argument("--full", required=True)
    p.add_argument("--emulator", required=True)
    p.add_argument("--lambda", dest="lam", type=_nonneg, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("merge", help="fold adapters into their weights")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="print eval metrics as key=value")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run all four arms over the configured seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", action="store_true", help="evaluate arms on a thread pool")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_experiment)

    for name, values, func, help_text in (
        ("sweep-lambda", _csv_floats, cmd_sweep_lambda, "corrected eval loss per lambda"),
        ("sweep-calib", _csv_ints, cmd_sweep_calib, "reconstruction error per calibration size"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--values", type=values, required=True)
        p.add_argument("--out", help="also write CSVs and a figure to this directory")
        p.add_argument("--no-figures", action="store_true")
        p.set_defaults(func=func)
    return parser


def _classify(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, StageError):
        return CliError("stage", str(exc.cause), stage=exc.stage)
    if isinstance(exc, CRCError):
        return CliError("crc", str(exc))
    if isinstance(exc, FormatError):
        return CliError("format", str(exc))
    if isinstance(exc, ConfigError):
        return CliError("config", str(exc))
    if isinstance(exc, (FileNotFoundError, IsADirectoryError)):
        return CliError("missing_file", str(exc))
    if isinstance(exc, (StructureError, LinalgError, TapeError, ValueError)):
        return CliError("value", str(exc))
    if isinstance(exc, OSError):
        return CliError("missing_file", str(exc))
    raise exc


def _threads() -> int:
    raw = os.environ.get("EMLOC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError("usage", f"EMLOC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError("usage", f"EMLOC_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except Exception as exc:
        err = _classify(exc)
        extra = "".join(f" {k}={v}" for k, v in err.extra.items())
        print(f"error kind={err.kind}{extra} msg={json.dumps(err.msg)}", file=sys.stderr)
        return EXIT_CODES[err.kind]


if __name__ == "__main__":
    raise SystemExit(main())
