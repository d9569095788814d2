"""Label-budget experiment grid: train/evaluate every (budget, mode, seed) cell.

Cells run sequentially and independently; one failing cell is recorded and the
grid continues. Outputs under the experiment directory:

    cells/<budget>-<mode>-s<seed>/   checkpoint, training log, metrics.csv
    results.csv                      one row per successful cell
    summary.txt                      seed-averaged table and any failures
    loss_curves.png, dice_by_budget.png
"""
from __future__ import annotations

import logging
import traceback
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import DatasetSplit
from .metrics import MetricReport, evaluate, report_to_csv
from .model import ModelConfig
from .trainer import Checkpoint, TrainConfig, train

log = logging.getLogger(__name__)

RESULTS_HEADER = "budget,mode,seed,dice,miou,sensitivity,precision,hd"


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "label-budget"
    budgets: tuple[int | str, ...] = (25, "all")
    modes: tuple[str, ...] = ("semi", "fully")
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if not self.budgets or not self.modes or not self.seeds:
            raise ValueError("experiment needs at least one budget, mode and seed")
        for b in self.budgets:
            if isinstance(b, str):
                if b != "all":
                    raise ValueError(f"budget must be a positive int or 'all', got {b!r}")
            elif b < 1:
                raise ValueError(f"budget must be a positive int or 'all', got {b}")
        bad = set(self.modes) - {"semi", "fully"}
        if bad:
            raise ValueError(f"unknown training modes: {sorted(bad)}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        for key in ("budgets", "modes", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class CellResult:
    budget: int | str
    mode: str
    seed: int
    out_dir: Path
    report: MetricReport | None = None
    checkpoint: Checkpoint | None = field(default=None, repr=False)
    error: str | None = None

    @property
    def label(self) -> str:
        return f"{self.budget}-{self.mode}-s{self.seed}"


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    cells: list[CellResult]
    out_dir: Path

    @property
    def failed(self) -> list[CellResult]:
        return [c for c in self.cells if c.error is not None]

    def cell(self, budget, mode, seed) -> CellResult:
        for c in self.cells:
            if (c.budget, c.mode, c.seed) == (budget, mode, seed):
                return c
        raise KeyError((budget, mode, seed))


def _results_row(c: CellResult) -> str:
    a = c.report.aggregate
    hd = "" if a.hd is None else f"{a.hd:.6f}"
    return (f"{c.budget},{c.mode},{c.seed},{a.dice:.6f},{a.miou:.6f},"
            f"{a.sensitivity:.6f},{a.precision:.6f},{hd}")


def results_csv(cells: list[CellResult]) -> str:
    lines = [RESULTS_HEADER]
    lines += [_results_row(c) for c in cells if c.report is not None]
    return "\n".join(lines) + "\n"


def _summary_text(result: ExperimentResult) -> str:
    lines = [f"experiment: {result.spec.name}", ""]
    lines.append(f"{'budget':>8} {'mode':>6} {'n':>3} {'dice':>8} {'miou':>8} "
                 f"{'sens':>8} {'prec':>8}")
    for budget in result.spec.budgets:
        for mode in result.spec.modes:
            reports = [c.report for c in result.cells
                       if c.budget == budget and c.mode == mode and c.report]
            if not reports:
                continue
            n = len(reports)
            mean = lambda f: sum(f(r.aggregate) for r in reports) / n
            lines.append(f"{str(budget):>8} {mode:>6} {n:>3} "
                         f"{mean(lambda a: a.dice):8.4f} {mean(lambda a: a.miou):8.4f} "
                         f"{mean(lambda a: a.sensitivity):8.4f} "
                         f"{mean(lambda a: a.precision):8.4f}")
    if result.failed:
        lines += ["", "failed cells:"]
        lines += [f"  {c.label}: {c.error}" for c in result.failed]
    return "\n".join(lines) + "\n"


def _write_plots(result: ExperimentResult) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    done = [c for c in result.cells if c.checkpoint is not None and c.checkpoint.history]
    if done:
        fig, ax = plt.subplots(figsize=(8, 5))
        for c in done:
            ax.plot([r.iteration for r in c.checkpoint.history],
                    [r.total for r in c.checkpoint.history],
                    label=c.label, linewidth=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        ax.legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(result.out_dir / "loss_curves.png", dpi=120)
        plt.close(fig)

    scored = [c for c in result.cells if c.report is not None]
    if scored:
        fig, ax = plt.subplots(figsize=(6, 4))
        budgets = [b for b in result.spec.budgets
                   if any(c.budget == b for c in scored)]
        xs = range(len(budgets))
        for mode in result.spec.modes:
            ys = []
            for b in budgets:
                vals = [c.report.aggregate.dice for c in scored
                        if c.budget == b and c.mode == mode]
                ys.append(sum(vals) / len(vals) if vals else float("nan"))
            ax.plot(list(xs), ys, marker="o", label=mode)
        ax.set_xticks(list(xs), [str(b) for b in budgets])
        ax.set_xlabel("label budget")
        ax.set_ylabel("mean val dice")
        ax.legend()
        fig.tight_layout()
        fig.savefig(result.out_dir / "dice_by_budget.png", dpi=120)
        plt.close(fig)


def run_experiment(spec: ExperimentSpec, split: DatasetSplit,
                   model_config: ModelConfig, train_config: TrainConfig,
                   out_dir: Path | str, make_plots: bool = True) -> ExperimentResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not split.val:
        raise ValueError("experiment needs a non-empty validation split")
    cells = []
    for budget in spec.budgets:
        for mode in spec.modes:
            for seed in spec.seeds:
                cell = CellResult(budget, mode, seed,
                                  out / "cells" / f"{budget}-{mode}-s{seed}")
                cells.append(cell)
                cfg = replace(train_config, mode=mode, label_budget=budget, seed=seed)
                log.info("cell %s: training %d iterations on %d train / %d val images",
                         cell.label, cfg.total_iterations, len(split.train), len(split.val))
                try:
                    ckpt = train(cfg, split, model_config, out_dir=cell.out_dir)
                    report = evaluate(ckpt, split.val)
                    (cell.out_dir / "metrics.csv").write_text(report_to_csv(report))
                    cell.checkpoint = ckpt
                    cell.report = report
                    log.info("cell %s: val dice %.4f", cell.label, report.aggregate.dice)
                except Exception as e:  # keep the grid going; the cell records why
                    cell.error = f"{type(e).__name__}: {e}"
                    log.error("cell %s failed: %s\n%s", cell.label, e,
                              traceback.format_exc())
    result = ExperimentResult(spec=spec, cells=cells, out_dir=out)
    (out / "results.csv").write_text(results_csv(cells))
    (out / "summary.txt").write_text(_summary_text(result))
    if make_plots:
        _write_plots(result)
    return result
