"""Ablation grids at desk scale.

Each suite is a fixed row x column grid of run configurations.  A cell is
pre-trained once per seed in ``ablate.seeds``, probed with the linear probe,
and reported as the mean accuracy together with its gain over the row's
no-FA baseline.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from feataug.config import ConfigError, RunConfig, dump_config
from feataug.datasets import Dataset
from feataug.evaluation import knn_probe, linear_probe
from feataug.feature_aug import METHODS
from feataug.train import Trainer, load_dataset

log = logging.getLogger(__name__)

SUITES = ("architectures", "stopgrad", "da-settings", "byol-fa")
FA_METHODS = METHODS[1:]
COLUMN_TITLES = {
    "none": "No FA",
    "mask": "Mask",
    "nn": "NN",
    "nn_noise": "NN noise",
    "batch_noise": "Batch noise",
    "gaussian_noise": "Gaussian noise",
}
CSV_FIELDS = (
    "suite",
    "row",
    "column",
    "layout",
    "stop_grad",
    "projector",
    "aug_setting",
    "fa_k",
    "combine",
    "seeds",
    "accuracy",
    "knn_accuracy",
    "delta",
)


@dataclass(frozen=True)
class Grid:
    suite: str
    title: str
    rows: tuple[str, ...]
    columns: tuple[str, ...]
    cells: dict[tuple[str, str], dict[str, object]]
    # (row label, overrides) of a reference run outside the grid, if any
    baseline: tuple[str, dict[str, object]] | None = None

    def baseline_key(self, row: str) -> tuple[str, str]:
        if self.baseline is not None:
            return (self.baseline[0], "none")
        return (row, "none")


def suite_grid(suite: str) -> Grid:
    cols = ("none",) + FA_METHODS
    cells: dict[tuple[str, str], dict[str, object]] = {}
    if suite == "architectures":
        rows = {
            "Basic": {"layout.kind": "Basic", "model.projector": "weak"},
            "Basic + strong proj": {"layout.kind": "Basic", "model.projector": "strong"},
            "ParallelPred": {"layout.kind": "ParallelPred", "model.projector": "strong"},
            "PostPred": {"layout.kind": "PostPred", "model.projector": "strong"},
            "PrePred": {"layout.kind": "PrePred", "model.projector": "strong"},
        }
        for r, ov in rows.items():
            for c in cols:
                cells[(r, c)] = {**ov, "fa.method": c, "layout.stop_grad": True}
        return Grid(suite, "Architectures with feature augmentation", tuple(rows), cols, cells)
    if suite == "stopgrad":
        rows = {}
        for lay in ("ParallelPred", "PostPred", "PrePred"):
            for sg in (True, False):
                label = f"{lay} / {'stop-grad' if sg else 'no stop-grad'}"
                rows[label] = {"layout.kind": lay, "layout.stop_grad": sg, "model.projector": "strong"}
        for r, ov in rows.items():
            for c in cols:
                cells[(r, c)] = {**ov, "fa.method": c}
        return Grid(suite, "Stop-gradient on and off", tuple(rows), cols, cells)
    if suite == "da-settings":
        rows = ("SymmWeakAug", "SymmStrongAug", "AsymmStrongAug")
        for r in rows:
            for c in cols:
                cells[(r, c)] = {"aug.setting": r, "layout.kind": "ParallelPred", "fa.method": c}
        return Grid(suite, "Data augmentation settings", rows, cols, cells)
    if suite == "byol-fa":
        rows = {
            "Aug 1": {"fa.k": 1, "layout.combine": "Average"},
            "Aug 4": {"fa.k": 4, "layout.combine": "Average"},
            "Aug 1 free": {"fa.k": 1, "layout.combine": "Free"},
            "Aug 4 free": {"fa.k": 4, "layout.combine": "Free"},
        }
        base = {"layout.kind": "ByolFa", "layout.stop_grad": True}
        for r, ov in rows.items():
            for c in FA_METHODS:
                cells[(r, c)] = {**base, **ov, "fa.method": c}
        baseline = ("Baseline", {**base, "fa.method": "none", "fa.k": 1, "layout.combine": "Average"})
        return Grid(suite, "EMA target with feature augmentation", tuple(rows), FA_METHODS, cells, baseline)
    raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")


@dataclass
class CellResult:
    row: str
    column: str
    cfg: RunConfig
    accuracies: list[float]
    knn_accuracies: list[float]
    delta: float | None = None

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def knn_accuracy(self) -> float:
        return float(np.mean(self.knn_accuracies))


@dataclass
class SuiteResult:
    grid: Grid
    cells: dict[tuple[str, str], CellResult] = field(default_factory=dict)
    baseline: CellResult | None = None

    def ordered(self) -> list[CellResult]:
        out = [self.baseline] if self.baseline is not None else []
        return out + [self.cells[(r, c)] for r in self.grid.rows for c in self.grid.columns]


def check_suite_config(suite: str, cfg: RunConfig) -> None:
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")
    if suite == "da-settings" and cfg.data.kind != "cifar10":
        raise ConfigError("the da-settings suite compares image pipelines and needs data.kind = cifar10")
    for overrides in suite_grid(suite).cells.values():
        cfg.copy({**overrides, "train.seed": cfg.ablate.seeds[0]})


def _run_cell(cfg: RunConfig, dataset: Dataset) -> tuple[float, float]:
    trainer = Trainer(cfg, dataset)
    trainer.run(until=cfg.ablate.steps or None)
    enc = trainer.models.encoder
    return linear_probe(enc, dataset, cfg.probe).accuracy, knn_probe(enc, dataset, cfg.probe.knn_k)


def run_suite(suite: str, base: RunConfig, dataset: Dataset | None = None, progress=None) -> SuiteResult:
    """Run every cell of ``suite``; identical effective configs are trained only once."""
    check_suite_config(suite, base)
    grid = suite_grid(suite)
    dataset = dataset if dataset is not None else load_dataset(base)
    memo: dict[str, tuple[float, float]] = {}
    result = SuiteResult(grid)

    def evaluate(row: str, col: str, overrides: dict) -> CellResult:
        cell = CellResult(row, col, base.copy(overrides), [], [])
        for seed in base.ablate.seeds:
            cfg = base.copy({**overrides, "train.seed": seed})
            key = dump_config(cfg)
            if key not in memo:
                memo[key] = _run_cell(cfg, dataset)
            acc, knn = memo[key]
            cell.accuracies.append(acc)
            cell.knn_accuracies.append(knn)
        log.info("%s | %s | %s: %.4f", suite, row, col, cell.accuracy)
        if progress is not None:
            progress(cell)
        return cell

    if grid.baseline is not None:
        result.baseline = evaluate(grid.baseline[0], "none", grid.baseline[1])
    for r in grid.rows:
        for c in grid.columns:
            result.cells[(r, c)] = evaluate(r, c, grid.cells[(r, c)])
    for (r, c), cell in result.cells.items():
        ref = result.baseline if grid.baseline is not None else result.cells[(r, "none")]
        if cell is not ref:
            cell.delta = cell.accuracy - ref.accuracy
    return result


def _pct(x: float) -> str:
    return f"{100 * x:.1f}"


def to_markdown(result: SuiteResult) -> str:
    g = result.grid
    lines = [f"### {g.title} ({g.suite})", ""]
    if result.baseline is not None:
        lines += [f"{result.baseline.row} (no FA): {_pct(result.baseline.accuracy)}", ""]
    lines.append("| Method | " + " | ".join(COLUMN_TITLES[c] for c in g.columns) + " |")
    lines.append("|---|" + "---|" * len(g.columns))
    for r in g.rows:
        cells = []
        for c in g.columns:
            cell = result.cells[(r, c)]
            text = _pct(cell.accuracy)
            if cell.delta is not None:
                text += f" ({100 * cell.delta:+.1f})"
            cells.append(text)
        lines.append(f"| {r} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def to_csv(result: SuiteResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for cell in result.ordered():
        c = cell.cfg
        w.writerow(
            [
                result.grid.suite,
                cell.row,
                cell.column,
                c.layout.kind,
                str(c.layout.stop_grad).lower(),
                c.projector_kind(),
                c.aug.setting,
                c.fa.k,
                c.layout.combine,
                ";".join(str(s) for s in c.ablate.seeds),
                repr(cell.accuracy),
                repr(cell.knn_accuracy),
                "" if cell.delta is None else repr(cell.delta),
            ]
        )
    return buf.getvalue()
