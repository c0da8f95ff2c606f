"""Absolute-error analysis of saved predictions: summary statistics, cumulative
error-accuracy curves and their area, plus static plots."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError, MetricError

REPORT_COLUMNS = ("run", "mean_abs_err", "median_abs_err", "std_abs_err", "auc")
PREDICTIONS_NAME = "predictions.csv"


@dataclass
class ErrorSummary:
    run: str
    mean_abs_err: float
    median_abs_err: float
    std_abs_err: float
    auc: float

    def row(self):
        return [self.run, f"{self.mean_abs_err:.6f}", f"{self.median_abs_err:.6f}",
                f"{self.std_abs_err:.6f}", f"{self.auc:.6f}"]


def cumulative_accuracy(errors, thresholds):
    """Fraction of absolute errors at or below each threshold."""
    e = np.sort(np.abs(np.asarray(errors, dtype=np.float64)))
    return np.searchsorted(e, thresholds, side="right") / len(e)


def error_auc(errors, max_error):
    """Normalised area under the cumulative error-accuracy curve on ``[0, max_error]``.

    Equals ``mean(max(0, 1 - |e| / max_error))``; 1.0 for a perfect run.
    """
    if not max_error > 0:
        raise MetricError(f"max_error must be positive, got {max_error}")
    e = np.abs(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        raise MetricError("no errors to summarise")
    return float(np.mean(np.maximum(0.0, 1.0 - e / max_error)))


def summarize(run, truth, pred, max_error=5.0):
    err = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64))
    if err.size == 0:
        raise MetricError(f"run {run!r} has no predictions")
    return ErrorSummary(run, float(err.mean()), float(np.median(err)), float(err.std()),
                        error_auc(err, max_error))


def read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        truth = np.array([float(r["truth"]) for r in rows])
        pred = np.array([float(r["pred"]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise IngestionError(f"{path}: malformed predictions file ({exc})") from None
    return truth, pred


def find_runs(root):
    """Map run name to predictions file for every run under ``root``."""
    root = Path(root)
    found = sorted(root.rglob(PREDICTIONS_NAME))
    runs = {}
    for path in found:
        rel = path.parent.relative_to(root)
        runs[str(rel) if str(rel) != "." else root.name] = path
    if not runs:
        raise IngestionError(f"no {PREDICTIONS_NAME} found under {root}")
    return runs


def build_report(root, max_error=5.0):
    summaries, errors = [], {}
    for name, path in find_runs(root).items():
        truth, pred = read_predictions(path)
        summaries.append(summarize(name, truth, pred, max_error))
        errors[name] = np.abs(pred - truth)
    return summaries, errors


def to_csv(summaries):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for s in summaries:
        writer.writerow(s.row())
    return buf.getvalue()


def plot(errors, out_dir, max_error=5.0):
    """Write ``abs_error_boxplot.png`` and ``cumulative_error.png``; returns the paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    names = list(errors)
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2.5, 3.5))
    ax.boxplot([errors[n] for n in names])
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel("absolute error")
    fig.tight_layout()
    box = out / "abs_error_boxplot.png"
    fig.savefig(box, dpi=100, metadata={"Software": None})
    plt.close(fig)

    grid = np.linspace(0.0, max_error, 101)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for n in names:
        auc = error_auc(errors[n], max_error)
        ax.plot(grid, cumulative_accuracy(errors[n], grid), label=f"{n} (AUC {auc:.3f})")
    ax.set_xlabel("error threshold")
    ax.set_ylabel("fraction within threshold")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    cum = out / "cumulative_error.png"
    fig.savefig(cum, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return box, cum
