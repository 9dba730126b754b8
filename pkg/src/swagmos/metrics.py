"""MSE, LCC, SRCC and KTAU at utterance and system level.

Ties: Spearman uses average ranks, Kendall is tau-b. Constant inputs raise
:class:`DegeneracyError` instead of producing NaN. System-level scores are
computed on per-system means of predictions and of true MOS.
"""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .dataio import Dataset, group_by_system
from .errors import CoverageError, DegeneracyError, ShapeError

METRIC_NAMES = ("mse", "lcc", "srcc", "ktau")


def _pair(a, b, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_len:
        raise ShapeError(f"need at least {min_len} values, got {a.size}")
    return a, b


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def pearson_lcc(a, b) -> float:
    a, b = _pair(a, b, 2)
    da = a - a.mean()
    db = b - b.mean()
    sa = float(np.dot(da, da))
    sb = float(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        raise DegeneracyError("correlation undefined for a constant vector")
    r = float(np.dot(da, db)) / math.sqrt(sa * sb)
    return min(1.0, max(-1.0, r))


def average_ranks(a) -> np.ndarray:
    """1-based ranks; tied values share the mean of the positions they occupy."""
    a = np.asarray(a, dtype=np.float64).ravel()
    _, inverse, counts = np.unique(a, return_inverse=True, return_counts=True)
    before = np.cumsum(counts) - counts
    return (before + (counts + 1) / 2.0)[inverse]


def spearman_srcc(a, b) -> float:
    a, b = _pair(a, b, 2)
    return pearson_lcc(average_ranks(a), average_ranks(b))


def _tied_pairs(sorted_values: np.ndarray) -> int:
    _, counts = np.unique(sorted_values, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def _count_inversions(x: np.ndarray) -> int:
    """Pairs i < j with x[i] > x[j] (Fenwick tree over dense ranks)."""
    _, dense = np.unique(x, return_inverse=True)
    dense = dense.astype(np.int64) + 1
    size = int(dense.max()) if dense.size else 0
    tree = [0] * (size + 1)
    inversions = 0
    seen = 0
    for v in dense.tolist():
        # number of earlier elements <= v
        k, le = v, 0
        while k > 0:
            le += tree[k]
            k -= k & -k
        inversions += seen - le
        k = v
        while k <= size:
            tree[k] += 1
            k += k & -k
        seen += 1
    return inversions


def kendall_ktau(a, b) -> float:
    """Kendall tau-b via Knight's sort-and-count algorithm."""
    a, b = _pair(a, b, 2)
    n = a.size
    n0 = n * (n - 1) // 2
    order = np.lexsort((b, a))
    a_s, b_s = a[order], b[order]
    ties_a = _tied_pairs(a_s)
    ties_b = _tied_pairs(b_s)
    joint = int(
        sum(c * (c - 1) // 2 for c in np.unique(np.stack([a_s, b_s]), axis=1, return_counts=True)[1])
    )
    if ties_a == n0 or ties_b == n0:
        raise DegeneracyError("kendall tau undefined: every pair is tied in one argument")
    discordant = _count_inversions(b_s)
    concordant_minus_discordant = n0 - ties_a - ties_b + joint - 2 * discordant
    return concordant_minus_discordant / math.sqrt(float((n0 - ties_a) * (n0 - ties_b)))


def metric_suite(pred, truth) -> dict[str, float]:
    return {
        "mse": mse(pred, truth),
        "lcc": pearson_lcc(pred, truth),
        "srcc": spearman_srcc(pred, truth),
        "ktau": kendall_ktau(pred, truth),
    }


@dataclass(frozen=True)
class MetricReport:
    utterance: dict[str, float]
    system: dict[str, float]
    n_utterances: int
    n_systems: int

    def to_dict(self) -> dict:
        return {
            "utterance": dict(self.utterance),
            "system": dict(self.system),
            "n_utterances": self.n_utterances,
            "n_systems": self.n_systems,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> MetricReport:
        return cls(dict(obj["utterance"]), dict(obj["system"]), obj["n_utterances"], obj["n_systems"])

    def format_table(self, label: str = "model") -> str:
        cols = ("mse", "lcc", "ktau", "srcc")
        width = max(8, len(label))
        head = f"{'Model':<{width}} | " + " | ".join(f"{c.upper():>6}" for c in cols)
        lines = []
        for title, block in (("System-level metrics", self.system), ("Utterance-level metrics", self.utterance)):
            lines.append(title)
            lines.append(head)
            lines.append("-" * len(head))
            lines.append(f"{label:<{width}} | " + " | ".join(f"{block[c]:6.3f}" for c in cols))
            lines.append("")
        lines.append(f"utterances: {self.n_utterances}  systems: {self.n_systems}")
        return "\n".join(lines) + "\n"


def evaluate(pred: Mapping[str, float], d: Dataset) -> MetricReport:
    """Score predictions (keyed by utterance id) against the labeled records of ``d``."""
    labeled = d.labeled()
    missing = [r.utterance_id for r in labeled if r.utterance_id not in pred]
    if missing:
        raise CoverageError(f"{len(missing)} labeled utterance(s) lack predictions: {missing[:20]}")
    p = np.array([float(pred[r.utterance_id]) for r in labeled], dtype=np.float64)
    t = labeled.labels()
    groups = group_by_system(labeled)
    if len(groups) < 2:
        raise DegeneracyError(f"system-level metrics need >= 2 systems, found {len(groups)}")
    sys_p = np.array([p[idx].mean() for idx in groups.values()])
    sys_t = np.array([t[idx].mean() for idx in groups.values()])
    return MetricReport(
        utterance=metric_suite(p, t),
        system=metric_suite(sys_p, sys_t),
        n_utterances=len(labeled),
        n_systems=len(groups),
    )
