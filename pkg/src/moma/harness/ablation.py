"""Ablation matrices over fusion kind, Divide window and layer pattern.

Each cell overrides one model setting of a base experiment, trains on the
synthetic task and is scored on the held-out split. A failing cell is
recorded with its error message and the matrix carries on.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

from moma.core.tensor import FlopMeter
from moma.fusion import KINDS
from moma.harness.config import ExperimentConfig
from moma.harness.data import gen_task
from moma.model import MoMaModel, count_parameters
from moma.pattern import parse_pattern
from moma.train import accuracy, fit

log = logging.getLogger(__name__)

MATRICES = ("fusion", "window", "pattern")
SCHEMA = "# moma-ablation v1"
COLUMNS = ("matrix", "cell", "setting", "seed", "val_acc", "trainable_params", "flops", "status")


@dataclass(frozen=True)
class Cell:
    matrix: str
    name: str
    changes: dict = field(default_factory=dict, hash=False)

    def setting(self) -> str:
        return ";".join(f"{k}={v}" for k, v in sorted(self.changes.items()))


def _side(size: int, grid: int, ref: int) -> int:
    """Rescale a window side from a reference grid width to ours, rounded down to a divisor."""
    s = max(1, round(size * grid / ref))
    while grid % s:
        s -= 1
    return s


def window_cells(frames: int, grid: int) -> list[Cell]:
    """Window list rescaled from a 32-patch-wide, 16-frame grid to ``grid`` x ``grid`` x ``frames``."""
    big, mid, small = (_side(s, grid, 32) for s in (16, 8, 4))
    depth = _side(4, frames, 16)
    specs = [("full", "frame"), ("16x16", f"{big}x{big}"), ("8x8", f"{mid}x{mid}"),
             ("4x4x4", f"{depth}x{small}x{small}"), ("4x4", f"{small}x{small}")]
    return [Cell("window", name, {"window": w}) for name, w in specs]


def pattern_cells(depth: int) -> list[Cell]:
    """The four reference patterns at ``depth`` layers, plus alternate readings of the third and fourth."""
    if depth % 2:
        raise ValueError(f"pattern matrix needs an even depth, got {depth}")
    h = depth // 2
    specs = [("TM", f"[TM]{depth}"), ("T-then-M", f"[T]{depth}[M]{depth}"),
             ("T-then-TMM", f"[T]{h}[TMM]{h}"), ("TTMM", f"[TTMM]{h}"),
             ("T-then-TM", f"[T]{h}[TM]{h}"), ("TTM", f"[TTM]{h}")]
    return [Cell("pattern", name, {"pattern": p}) for name, p in specs]


def fusion_cells() -> list[Cell]:
    return [Cell("fusion", k, {"fusion": k}) for k in KINDS]


def matrix_cells(matrix: str, base: ExperimentConfig) -> list[Cell]:
    m = base.model
    if matrix == "fusion":
        return fusion_cells()
    if matrix == "window":
        return window_cells(m.frames, m.image // m.patch)
    if matrix == "pattern":
        return pattern_cells(parse_pattern(m.pattern).depth)
    raise ValueError(f"unknown ablation matrix {matrix!r}; valid: {', '.join(MATRICES)}")


@dataclass
class AblationRow:
    matrix: str
    cell: str
    setting: str
    seed: int
    val_acc: float = float("nan")
    trainable_params: int = 0
    flops: int = 0
    status: str = "ok"


@dataclass
class AblationReport:
    rows: list[AblationRow] = field(default_factory=list)

    def accuracies(self, cell: str) -> list[float]:
        return [r.val_acc for r in self.rows if r.cell == cell and r.status == "ok"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(SCHEMA + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            acc = "" if r.status != "ok" else f"{r.val_acc:.6f}"
            w.writerow([r.matrix, r.cell, r.setting, r.seed, acc, r.trainable_params, r.flops, r.status])
        return buf.getvalue()


def run_cell(cell: Cell, base: ExperimentConfig, seed: int, data=None) -> AblationRow:
    row = AblationRow(cell.matrix, cell.name, cell.setting(), seed)
    try:
        mcfg = base.model.replace(**cell.changes)
        tcfg = replace(base.train, seed=seed)
        train, val = data if data is not None else gen_task(base.task()).split()
        model = MoMaModel(mcfg, seed=seed)
        row.trainable_params = count_parameters(model.trainable())
        with FlopMeter() as meter:
            model.forward(val.pixels[:1])
        row.flops = meter.macs
        fit(model, train.as_pair(), val.as_pair(), tcfg)
        row.val_acc = accuracy(model, val.pixels, val.labels)
    except Exception as e:  # a broken cell must not stop the matrix
        log.warning("ablation cell %s/%s failed: %s", cell.matrix, cell.name, e)
        row.status = f"error: {type(e).__name__}: {e}"
    return row


def run_ablation(matrix: str, base: ExperimentConfig, seeds=(0,), cells=None, progress=None) -> AblationReport:
    """Run every cell of ``matrix`` (or only those named in ``cells``) for each seed."""
    chosen = matrix_cells(matrix, base)
    if cells is not None:
        known = {c.name for c in chosen}
        missing = [c for c in cells if c not in known]
        if missing:
            raise ValueError(f"unknown {matrix} cells {missing}; valid: {', '.join(sorted(known))}")
        chosen = [c for c in chosen if c.name in set(cells)]
    data = gen_task(base.task()).split()
    report = AblationReport()
    for cell in chosen:
        for seed in seeds:
            row = run_cell(cell, base, seed, data)
            report.rows.append(row)
            if progress is not None:
                progress(row)
    return report
