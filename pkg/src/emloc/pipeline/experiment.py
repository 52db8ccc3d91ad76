"""Experiment harness: compress, fine-tune on the emulator, transfer, evaluate.

Four arms per seed:

* ``zero_shot``  the released base model, untouched
* ``emulator``   the emulator carrying its trained adapters
* ``naive``      the trained adapters merged into the base model as is
* ``corrected``  the adapters corrected for the emulator gap, then merged

Also two sweeps, over the correction cap lambda and over calibration size.
"""

from __future__ import annotations

import contextlib
import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..correction import CorrectionReport, correct_network, transfer_lora
from ..emulator import build_emulator, network_weighted_error
from ..model import attach_lora, merge_network
from ..train import LossPoint, MemoryBudget, account_memory, evaluate, finetune
from .config import ExperimentConfig
from .tasks import SyntheticTask, generate_task

__all__ = [
    "ARMS",
    "MEMORY_BUDGETS",
    "StageError",
    "SeedResult",
    "ExperimentReport",
    "LambdaSweep",
    "CalibSweep",
    "run_seed",
    "run_experiment",
    "sweep_lambda",
    "sweep_calib",
    "write_curve_csv",
]

ARMS = ("zero_shot", "emulator", "naive", "corrected")
MEMORY_BUDGETS = ("inference_full", "finetune_full", "finetune_emulator")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class SeedResult:
    seed: int
    metrics: dict[str, dict[str, float]]
    curve: list[LossPoint]
    correction: CorrectionReport
    memory: dict[str, MemoryBudget]


def _prepare(cfg: ExperimentConfig, seed: int):
    with _stage("generate"):
        task = generate_task(seed, cfg.task)
    with _stage("compress"):
        emu = build_emulator(task.base, task.calib, cfg.ratio, activation_aware=cfg.activation_aware)
    with _stage("finetune"):
        tcfg = cfg.train_for(seed)
        trained, curve = finetune(attach_lora(emu, tcfg.lora_rank, seed), task.train, tcfg)
    return task, emu, trained, curve


def _evaluate_arms(nets: dict, data, parallel: bool) -> dict[str, dict[str, float]]:
    with _stage("eval"):
        if parallel:
            with ThreadPoolExecutor(max_workers=len(nets)) as pool:
                futures = {arm: pool.submit(evaluate, net, data) for arm, net in nets.items()}
                return {arm: fut.result() for arm, fut in futures.items()}
        return {arm: evaluate(net, data) for arm, net in nets.items()}


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    task, emu, trained, curve = _prepare(cfg, seed)
    with _stage("correct"):
        corrected, report = correct_network(trained, task.base, cfg.lam)
    with _stage("merge"):
        nets = {
            "zero_shot": task.base,
            "emulator": trained,
            "naive": merge_network(transfer_lora(trained, task.base)),
            "corrected": merge_network(corrected),
        }
    metrics = _evaluate_arms(nets, task.eval, cfg.parallel)
    tcfg = cfg.train_for(seed)
    memory = {
        "inference_full": account_memory(task.base, tcfg, "inference"),
        "finetune_full": account_memory(task.base, tcfg, "finetune"),
        "finetune_emulator": account_memory(emu, tcfg, "finetune"),
    }
    return SeedResult(seed, metrics, curve, report, memory)


def _median(values) -> float:
    return float(np.median(np.asarray(list(values), dtype=np.float64)))


def write_curve_csv(curve: list[LossPoint], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["step", "lr", "loss"])
    for p in curve:
        writer.writerow([p.step, repr(p.lr), repr(p.loss)])


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    results: list[SeedResult] = field(default_factory=list)

    @property
    def metric_names(self) -> list[str]:
        return list(self.results[0].metrics[ARMS[0]]) if self.results else ["loss"]

    def median(self, arm: str, metric: str = "loss") -> float:
        return _median(r.metrics[arm][metric] for r in self.results)

    def to_table(self) -> str:
        names = self.metric_names
        seeds = [r.seed for r in self.results]
        out = io.StringIO()
        header = ["arm"] + [f"median_{m}" for m in names] + [f"loss[seed={s}]" for s in seeds]
        rows = [header]
        for arm in ARMS:
            rows.append([arm] + [f"{self.median(arm, m):.6g}" for m in names]
                        + [f"{r.metrics[arm]['loss']:.6g}" for r in self.results])
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        for row in rows:
            out.write("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() + "\n")

        out.write("\nmemory (bytes, seed %d)\n" % seeds[0])
        mem = self.results[0].memory
        keys = list(next(iter(mem.values())).as_dict())
        out.write("budget             " + "  ".join(f"{k:>16}" for k in keys) + "\n")
        for name in MEMORY_BUDGETS:
            vals = mem[name].as_dict()
            out.write(f"{name:<18} " + "  ".join(f"{vals[k]:>16d}" for k in keys) + "\n")

        out.write("\ncorrection\n")
        for r in self.results:
            out.write(f"seed={r.seed} " + r.correction.to_text())
        return out.getvalue()

    def write(self, out_dir, *, figures: bool = True) -> list[Path]:
        """Write the table, per-arm CSVs, loss curves and (optionally) figures."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []

        def emit(name: str, text: str) -> None:
            path = out / name
            path.write_text(text, encoding="utf-8")
            written.append(path)

        emit("report.txt", self.to_table())
        names = self.metric_names
        for arm in ARMS:
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(["seed"] + names)
            for r in self.results:
                writer.writerow([r.seed] + [repr(r.metrics[arm][m]) for m in names])
            emit(f"arm_{arm}.csv", buf.getvalue())
        for r in self.results:
            buf = io.StringIO()
            write_curve_csv(r.curve, buf)
            emit(f"curve_seed{r.seed}.csv", buf.getvalue())
            emit(f"correction_seed{r.seed}.txt", r.correction.to_text())
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["seed", "budget", "params_bytes", "optimizer_bytes", "activation_bytes", "total_bytes"])
        for r in self.results:
            for name in MEMORY_BUDGETS:
                writer.writerow([r.seed, name, *r.memory[name].as_dict().values()])
        emit("memory.csv", buf.getvalue())

        if figures:
            from .. import plotting

            written.append(plotting.plot_loss_curves({r.seed: r.curve for r in self.results}, out / "loss_curves.png"))
            per_seed = {arm: [r.metrics[arm]["loss"] for r in self.results] for arm in ARMS}
            written.append(plotting.plot_arms(per_seed, out / "arms.png"))
        return written


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run every arm for each configured seed, in seed order."""
    report = ExperimentReport(cfg)
    for seed in cfg.seeds:
        report.results.append(run_seed(cfg, seed))
    return report


def _sweep_csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, int) else repr(float(v)) for v in row])
    return buf.getvalue()


@dataclass
class LambdaSweep:
    values: list[float]
    per_seed: dict[int, list[float]]

    @property
    def medians(self) -> list[float]:
        return [_median(losses[i] for losses in self.per_seed.values()) for i in range(len(self.values))]

    def to_csv(self) -> str:
        return _sweep_csv(["lambda", "eval_metric"], zip(self.values, self.medians))

    def seeds_csv(self) -> str:
        rows = [(s, lam, loss) for s, losses in self.per_seed.items() for lam, loss in zip(self.values, losses)]
        return _sweep_csv(["seed", "lambda", "eval_metric"], rows)

    def write(self, out_dir, *, figures: bool = True) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "lambda_sweep.csv", out / "lambda_sweep_seeds.csv"]
        paths[0].write_text(self.to_csv(), encoding="utf-8")
        paths[1].write_text(self.seeds_csv(), encoding="utf-8")
        if figures:
            from .. import plotting

            paths.append(plotting.plot_lambda_sweep(self.values, self.per_seed, out / "lambda_sweep.png"))
        return paths


def sweep_lambda(cfg: ExperimentConfig, values) -> LambdaSweep:
    """Eval loss of the corrected transfer at each lambda.

    Adapters are trained once per seed; only the correction is repeated.
    """
    values = [float(v) for v in values]
    if not values:
        raise ValueError("no lambda values given")
    per_seed = {}
    for seed in cfg.seeds:
        task, _, trained, _ = _prepare(cfg, seed)
        losses = []
        for lam in values:
            with _stage("correct"):
                corrected, _ = correct_network(trained, task.base, lam)
            with _stage("eval"):
                losses.append(evaluate(merge_network(corrected), task.eval)["loss"])
        per_seed[seed] = losses
    return LambdaSweep(values, per_seed)


@dataclass
class CalibSweep:
    values: list[int]
    weighted_error: dict[int, list[float]]
    eval_metric: dict[int, list[float]]

    def medians(self, which: str) -> list[float]:
        table = getattr(self, which)
        return [_median(row[i] for row in table.values()) for i in range(len(self.values))]

    def to_csv(self) -> str:
        rows = zip(self.values, self.medians("weighted_error"), self.medians("eval_metric"))
        return _sweep_csv(["n_calib", "weighted_error", "eval_metric"], rows)

    def seeds_csv(self) -> str:
        rows = [(s, n, e, m)
                for s in self.weighted_error
                for n, e, m in zip(self.values, self.weighted_error[s], self.eval_metric[s])]
        return _sweep_csv(["seed", "n_calib", "weighted_error", "eval_metric"], rows)

    def write(self, out_dir, *, figures: bool = True) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "calib_sweep.csv", out / "calib_sweep_seeds.csv"]
        paths[0].write_text(self.to_csv(), encoding="utf-8")
        paths[1].write_text(self.seeds_csv(), encoding="utf-8")
        if figures:
            from .. import plotting

            paths.append(plotting.plot_calib_sweep(self.values, self.medians("weighted_error"),
                                                   self.medians("eval_metric"), out / "calib_sweep.png"))
        return paths


def _calib_point(cfg: ExperimentConfig, seed: int, n: int, *, train: bool) -> tuple[float, float]:
    with _stage("generate"):
        task: SyntheticTask = generate_task(seed, cfg.task, n_calib=n)
    with _stage("compress"):
        emu = build_emulator(task.base, task.calib, cfg.ratio, activation_aware=cfg.activation_aware)
        err = network_weighted_error(task.base, emu, task.eval.x)
    if not train:
        return err, math.nan
    with _stage("finetune"):
        tcfg = cfg.train_for(seed)
        trained, _ = finetune(attach_lora(emu, tcfg.lora_rank, seed), task.train, tcfg)
    with _stage("correct"):
        corrected, _ = correct_network(trained, task.base, cfg.lam)
    with _stage("eval"):
        return err, evaluate(merge_network(corrected), task.eval)["loss"]


def sweep_calib(cfg: ExperimentConfig, values, *, train: bool = True) -> CalibSweep:
    """Held-out weighted reconstruction error (and corrected eval loss) per calibration size.

    Calibration rows come from their own stream, so a smaller set is a
    prefix of a larger one and the teacher and other splits stay fixed.
    """
    values = [int(v) for v in values]
    if not values or min(values) < 1:
        raise ValueError("calibration sizes must be positive integers")
    errors, metrics = {}, {}
    for seed in cfg.seeds:
        points = [_calib_point(cfg, seed, n, train=train) for n in values]
        errors[seed] = [p[0] for p in points]
        metrics[seed] = [p[1] for p in points]
    return CalibSweep(values, errors, metrics)
