"""Empirical audit of the neighborhood/confidence assumptions and the risk-bound constants."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .knn import NeighborIndex


@dataclass(frozen=True)
class AssumptionAudit:
    mu_i: float       # min q_i.q_j over image neighbor pairs
    mu_c: float       # min q_i.p_j over image/text neighbor pairs
    mu_p: float       # max ||q_i||_inf
    k_i_prime: int    # max number of images that list a given image as neighbor


@dataclass(frozen=True)
class BoundInputs:
    n: int
    m: int
    d: int
    c: int
    tau_ia: float
    tau_pa: float
    eta: float
    lambda_a: float
    lambda_pa: float
    lambda_sa: float
    l_is: float = 1.0
    l_i_lip: float = 1.0
    m_u: float = 1.0
    # unidentified constant from the Lagrange mean value argument, |log xi + 1|
    big_c: float = 1.0
    delta: float = 0.05


@dataclass(frozen=True)
class BoundReport:
    c_tilde_1: float
    c_tilde_2: float
    term_sqrt_n: float
    term_confidence: float
    term_prototype: float
    margin: float
    audit: AssumptionAudit
    inputs: BoundInputs

    def rows(self) -> list[tuple[str, float]]:
        out = [(k, v) for k, v in asdict(self.audit).items()]
        out += [(k, v) for k, v in asdict(self.inputs).items()]
        out += [("c_tilde_1", self.c_tilde_1), ("c_tilde_2", self.c_tilde_2),
                ("term_sqrt_n", self.term_sqrt_n), ("term_confidence", self.term_confidence),
                ("term_prototype", self.term_prototype), ("margin", self.margin)]
        return out


def _indices(nb) -> np.ndarray:
    return nb.indices if isinstance(nb, NeighborIndex) else np.asarray(nb)


def audit_assumptions(q: np.ndarray, p: np.ndarray, img_neighbors, cross_neighbors) -> AssumptionAudit:
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    img = _indices(img_neighbors)
    cross = _indices(cross_neighbors)
    if img.size == 0 or cross.size == 0:
        raise DataError("empty neighborhoods")
    if img.shape[0] != q.shape[0] or cross.shape[0] != q.shape[0]:
        raise DataError("neighborhood tables and assignments disagree on n")
    if img.max() >= q.shape[0] or cross.max() >= p.shape[0]:
        raise DataError("neighbor index out of range")
    mu_i = float(np.einsum("ic,ikc->ik", q, q[img]).min())
    mu_c = float(np.einsum("ic,ikc->ik", q, p[cross]).min())
    mu_p = float(q.max())
    k_prime = int(np.bincount(img.ravel(), minlength=q.shape[0]).max())
    return AssumptionAudit(mu_i, mu_c, mu_p, k_prime)


def measure_m_u(u) -> float:
    """Largest absolute embedding entry, a data-driven value for M_u."""
    return float(np.abs(np.asarray(u)).max())


def bound_constants(audit: AssumptionAudit, inputs: BoundInputs) -> BoundReport:
    a, x = audit, inputs
    if a.mu_i <= 0:
        raise NumericError("image neighborhood consistency bound violated: mu_I = 0")
    if a.mu_p <= 0:
        raise NumericError("prediction confidence bound violated: mu_p = 0")
    if not 0 < x.delta < 1:
        raise DataError("delta must lie in (0, 1)")
    if x.n < 1:
        raise DataError("n must be positive")
    log_inv_mu_p = math.log(1.0 / a.mu_p)
    log_inv_mu_i = math.log(1.0 / a.mu_i)
    c1 = (2.0 / a.mu_i
          + 2.0 * x.eta * x.big_c
          + 2.0 * x.lambda_a * x.m / x.tau_ia
          + 2.0 * x.lambda_a * x.lambda_pa * x.d * x.l_is * x.m_u / x.tau_pa
          + 2.0 * x.lambda_a * x.lambda_sa * x.c * log_inv_mu_p)
    c2 = ((2.0 + 2.0 * a.k_i_prime) * log_inv_mu_i
          + x.eta * x.big_c
          + 2.0 * x.lambda_a * (1.0 - a.mu_c) / x.tau_ia
          + x.lambda_a * x.lambda_pa * x.d * x.c * x.l_i_lip * x.m_u ** 2 / x.tau_pa
          + 2.0 * x.lambda_a * x.lambda_sa * x.c * log_inv_mu_p)
    t1 = c1 / math.sqrt(x.n)
    t2 = c2 * math.sqrt(math.log(1.0 / x.delta) / (2.0 * x.n))
    t3 = 2.0 * x.d * x.l_is * x.m_u / (x.n * x.tau_pa)
    return BoundReport(c1, c2, t1, t2, t3, t1 + t2 + t3, audit, inputs)


def format_report(report: BoundReport) -> str:
    lines = []
    for k, v in report.rows():
        label = k
        if k == "big_c":
            label = "C (unidentified constant from Lagrange mean value argument)"
        lines.append(f"{label:<60} {v:.6g}")
    return "\n".join(lines)


def write_report_csv(path, report: BoundReport) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        for k, v in report.rows():
            w.writerow([k, repr(float(v))])
