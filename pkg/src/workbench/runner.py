"""Single runs, preset x ratio x seed grids, and their CSV reports."""

import logging
import math
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .data import atomic_writer, write_csv_atomic
from .engine import train_seminll
from .experiment import build, load_datasets, read_assignments, serialize

log = logging.getLogger(__name__)

REPORT_HEADER = ("epoch", "train_loss", "test_acc", "sel_precision", "sel_recall", "clean_frac")
SUMMARY_HEADER = ("run_id", "preset", "noise_kind", "noise_ratio", "seed", "final_acc", "best_acc",
                  "mean_acc_last10", "final_acc_std", "best_acc_std", "mean_acc_last10_std", "status")
METRICS = ("final_acc", "best_acc", "mean_acc_last10")


def fmt(v):
    """Six-decimal fixed point; NaN stays ``nan``."""
    v = float(v)
    return "nan" if math.isnan(v) else f"{v:.6f}"


def report_rows(report):
    return [[str(r.epoch), fmt(r.train_loss), fmt(r.test_acc), fmt(r.sel_precision), fmt(r.sel_recall),
             fmt(r.clean_frac)] for r in report.rows]


def run_experiment(exp, out_dir=None):
    """Train one experiment; optionally write ``report.csv`` and ``experiment.txt`` to ``out_dir``."""
    train, test = load_datasets(exp)
    _, report = train_seminll(exp.run, train, test)
    if out_dir is not None:
        out_dir = Path(out_dir)
        with atomic_writer(out_dir / "experiment.txt") as fh:
            fh.write(serialize(exp))
        write_csv_atomic(out_dir / "report.csv", REPORT_HEADER, report_rows(report))
    return report


def with_overrides(text, overrides):
    """Parse experiment text with some ``(section, key) -> raw value`` settings replaced."""
    assignments, problems = read_assignments(text)
    for key, raw in overrides.items():
        line = assignments.get(key, (None, 0))[1]
        assignments[key] = (str(raw), line)
    return build(assignments, problems)


def parse_seeds(spec):
    """``"0..4"`` (inclusive), ``"3"`` or ``"0,2,5"`` -> list of ints."""
    spec = spec.strip()
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValueError(f"empty seed range {spec!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in spec.split(",") if s.strip()]


@dataclass(frozen=True)
class Cell:
    preset: str
    ratio: float
    seed: int

    @property
    def run_id(self):
        return f"{self.preset}_r{self.ratio:g}_s{self.seed}"


@dataclass
class CellResult:
    cell: Cell
    noise_kind: str
    final_acc: float = math.nan
    best_acc: float = math.nan
    mean_acc_last10: float = math.nan
    status: str = "ok"


def grid_cells(presets, ratios, seeds):
    if not presets or not ratios or not seeds:
        raise ValueError("grid axes must be nonempty")
    return [Cell(p, float(r), int(s)) for p in presets for r in ratios for s in seeds]


def cell_experiment(text, cell):
    return with_overrides(text, {("engine", "preset"): cell.preset, ("noise", "ratio"): repr(cell.ratio),
                                 ("engine", "seed"): cell.seed, ("noise", "seed"): cell.seed})


def _run_cell(text, cell, out_dir):
    # top-level so it pickles for worker processes; failures become a status, never an exception
    exp = cell_experiment(text, cell)
    result = CellResult(cell, exp.noise.kind)
    try:
        report = run_experiment(exp, Path(out_dir) / "runs" / cell.run_id)
        result.final_acc, result.best_acc = report.final_acc, report.best_acc
        result.mean_acc_last10 = report.mean_acc_last(10)
    except Exception as exc:  # recorded in summary.csv
        log.error("cell %s failed:\n%s", cell.run_id, traceback.format_exc())
        result.status = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
    return result


def summarize(results):
    """Summary rows: every cell in order, then one aggregate row per (preset, ratio) group.

    Aggregates use the cells whose status is ``ok``: the mean, and the sample
    standard deviation (``nan`` with fewer than two runs).  They are computed
    from the six-decimal values written in the cell rows, so recomputing them
    from the file reproduces them exactly.
    """
    rows = []
    groups = {}
    for res in results:
        c = res.cell
        rows.append([c.run_id, c.preset, res.noise_kind, fmt(c.ratio), str(c.seed),
                     fmt(res.final_acc), fmt(res.best_acc), fmt(res.mean_acc_last10), "", "", "", res.status])
        groups.setdefault((c.preset, c.ratio), []).append(res)
    for (preset, ratio), members in groups.items():
        ok = [m for m in members if m.status == "ok"]
        means, stds = [], []
        for name in METRICS:
            vals = [float(fmt(getattr(m, name))) for m in ok]
            means.append(fmt(statistics.fmean(vals)) if vals else "nan")
            stds.append(fmt(statistics.stdev(vals)) if len(vals) > 1 else "nan")
        rows.append([f"{preset}_r{ratio:g}_mean", preset, members[0].noise_kind, fmt(ratio), "",
                     *means, *stds, f"aggregate of {len(ok)}/{len(members)}"])
    return rows


def run_grid(text, presets, ratios, seeds, out_dir, parallel=1):
    """Run every cell, write per-run reports and ``summary.csv``; returns the cell results.

    All cells are parsed (and so validated) before anything trains.  Cells
    own their seeds and output directories, so ``parallel > 1`` changes only
    wall time, not any file.
    """
    cells = grid_cells(presets, ratios, seeds)
    for cell in cells:
        cell_experiment(text, cell)
    out_dir = Path(out_dir)
    if parallel > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_run_cell, text, c, out_dir) for c in cells]
            results = [f.result() for f in futures]
    else:
        results = [_run_cell(text, c, out_dir) for c in cells]
    write_csv_atomic(out_dir / "summary.csv", SUMMARY_HEADER, summarize(results))
    return results
