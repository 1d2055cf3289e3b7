"""Clustering accuracy (Hungarian matching), NMI and ARI."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray  # (c_pred, c_true)

    @classmethod
    def from_labels(cls, pred, truth) -> "ContingencyTable":
        pred, truth = _check(pred, truth)
        _, p_inv = np.unique(pred, return_inverse=True)
        _, t_inv = np.unique(truth, return_inverse=True)
        counts = np.zeros((p_inv.max() + 1, t_inv.max() + 1), dtype=np.int64)
        np.add.at(counts, (p_inv, t_inv), 1)
        return cls(counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def row_marginals(self) -> np.ndarray:
        return self.counts.sum(1)

    @property
    def col_marginals(self) -> np.ndarray:
        return self.counts.sum(0)


def _check(pred, truth):
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise DataError(f"length mismatch: {pred.size} predictions, {truth.size} labels")
    if pred.size == 0:
        raise DataError("empty label vectors")
    return pred, truth


def accuracy_hungarian(pred, truth) -> float:
    """Best one-to-one cluster/class matching; rectangular tables are zero-padded."""
    table = ContingencyTable.from_labels(pred, truth).counts
    size = max(table.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[:table.shape[0], :table.shape[1]] = table
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return float(padded[rows, cols].sum()) / table.sum()


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth, average: str = "geometric") -> float:
    """Mutual information normalized by sqrt(H(pred) H(truth)) (or their arithmetic mean)."""
    t = ContingencyTable.from_labels(pred, truth)
    n = t.n
    h_p = _entropy(t.row_marginals, n)
    h_t = _entropy(t.col_marginals, n)
    if h_p == 0 and h_t == 0:
        return 1.0
    if h_p == 0 or h_t == 0:
        return 0.0
    nz = t.counts > 0
    joint = t.counts[nz] / n
    outer = np.outer(t.row_marginals, t.col_marginals)[nz] / n ** 2
    mi = max(float(np.sum(joint * np.log(joint / outer))), 0.0)
    if average == "geometric":
        denom = np.sqrt(h_p * h_t)
    elif average == "arithmetic":
        denom = 0.5 * (h_p + h_t)
    else:
        raise DataError(f"unknown NMI normalization {average!r}")
    return min(mi / denom, 1.0)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(pred, truth) -> float:
    """Adjusted Rand index by pair counting on the contingency table."""
    t = ContingencyTable.from_labels(pred, truth)
    sum_ij = _comb2(t.counts).sum()
    sum_a = _comb2(t.row_marginals).sum()
    sum_b = _comb2(t.col_marginals).sum()
    total = _comb2(t.n)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial in the same way (all singletons or one cluster)
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def metric_report(pred, truth) -> dict[str, float]:
    return {"ACC": accuracy_hungarian(pred, truth), "NMI": nmi(pred, truth), "ARI": ari(pred, truth)}


def format_report(report: dict[str, float]) -> str:
    return "\n".join(f"{k:<4} {v:.4f}" for k, v in report.items())


def write_report_csv(path, report: dict[str, float]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in report.items():
            w.writerow([k, repr(float(v))])
