"""Evaluation metrics: Spearman correlation, relative L2 error, Fisher-z."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import DomainError, MetricError

REPORT_COLUMNS = ("category", "srcc", "r_l2", "n")


def _vector(x, name):
    x = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise MetricError(f"{name} contains non-finite values")
    return x


def rank(x):
    """1-based ranks with ties assigned their average rank."""
    return kernels.average_ranks(_vector(x, "x"))


def srcc(truth, pred):
    """Spearman's rho: Pearson correlation of average ranks."""
    s, p = _vector(truth, "truth"), _vector(pred, "pred")
    if s.shape != p.shape:
        raise MetricError(f"length mismatch: {s.size} vs {p.size}")
    if s.size < 2:
        raise MetricError("srcc needs at least two samples")
    rs, rp = kernels.average_ranks(s), kernels.average_ranks(p)
    ds, dp = rs - rs.mean(), rp - rp.mean()
    den = np.sqrt((ds * ds).sum()) * np.sqrt((dp * dp).sum())
    if den == 0.0:
        raise MetricError("srcc undefined: an input has zero rank variance")
    return float(np.clip((ds * dp).sum() / den, -1.0, 1.0))


def r_l2(truth, pred, s_max, s_min):
    """Mean squared error relative to the score range, times 100."""
    if not s_max > s_min:
        raise DomainError(f"need s_max > s_min, got s_max={s_max}, s_min={s_min}")
    s, p = _vector(truth, "truth"), _vector(pred, "pred")
    if s.shape != p.shape or s.size == 0:
        raise MetricError(f"length mismatch or empty input: {s.size} vs {p.size}")
    rel = np.abs(s - p) / (s_max - s_min)
    return float(np.mean(rel * rel) * 100.0)


def fisher_z_avg(values, clamp=False):
    """Average correlations in Fisher-z space: ``tanh(mean(atanh(rho)))``.

    With ``clamp=True`` values at +-1 are pulled to +-(1 - 1e-12) instead of
    raising.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise MetricError("fisher_z_avg needs at least one value")
    if clamp:
        v = np.clip(v, -1 + 1e-12, 1 - 1e-12)
    elif np.any(np.abs(v) >= 1.0):
        raise DomainError("fisher_z_avg needs |rho| < 1 for every input")
    return float(np.tanh(np.mean(np.arctanh(v))))


@dataclass
class EvalReport:
    srcc: float
    r_l2: float
    n: int
    per_category: dict = field(default_factory=dict)

    def rows(self):
        """CSV rows; per-category first, then the Fisher-z ``average`` or ``all``."""
        out = [{"category": k, "srcc": v["srcc"], "r_l2": v["r_l2"], "n": v["n"]}
               for k, v in sorted(self.per_category.items())]
        label = "average" if self.per_category else "all"
        out.append({"category": label, "srcc": self.srcc, "r_l2": self.r_l2, "n": self.n})
        return out

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({**row, "srcc": f"{row['srcc']:.6f}", "r_l2": f"{row['r_l2']:.6f}"})
        return buf.getvalue()

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate(truth, pred, s_min, s_max, categories=None):
    """Build an :class:`EvalReport`; with categories, average SRCC via Fisher-z."""
    truth, pred = _vector(truth, "truth"), _vector(pred, "pred")
    if categories is None:
        return EvalReport(srcc(truth, pred), r_l2(truth, pred, s_max, s_min), int(truth.size))
    categories = np.asarray(categories)
    per = {}
    for cat in sorted(set(categories.tolist())):
        sel = categories == cat
        per[str(cat)] = {"srcc": srcc(truth[sel], pred[sel]),
                         "r_l2": r_l2(truth[sel], pred[sel], s_max, s_min),
                         "n": int(sel.sum())}
    avg_rho = fisher_z_avg([v["srcc"] for v in per.values()], clamp=True)
    avg_l2 = float(np.mean([v["r_l2"] for v in per.values()]))
    return EvalReport(avg_rho, avg_l2, int(truth.size), per)
