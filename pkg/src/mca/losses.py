"""MCA objective terms and their analytic gradients.

Total objective::

    L = L_I + lambda_a * (L_ia + lambda_pa * L_pa + lambda_sa * (L_sa + L_att))

where ``L_I`` is neighbor consistency plus the cluster-balance term,
``L_ia``/``L_pa`` are the instance/prototype contrastive terms (positive
excluded from the denominator), ``L_sa`` is cross entropy against one-hot
attention pseudo-labels and ``L_att`` trains the attention matrices by
pulling the attention output toward the (detached) image assignment.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .knn import NeighborIndex
from .model import ModelParams, nearest_word_neighborhoods, pseudo_label, softmax

EPS = 1e-12
REDUCE_BLOCK = 64


@dataclass(frozen=True)
class LossBreakdown:
    l_consistency: float
    l_entropy_term: float
    l_instance: float
    l_prototype: float
    l_semantic: float
    l_total: float
    l_semantic_ce: float = 0.0
    l_attention: float = 0.0

    @property
    def l_image(self) -> float:
        return self.l_consistency + self.l_entropy_term


@dataclass
class GradientSet(ModelParams):
    def check_finite(self) -> None:
        for name, arr in self.blocks().items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite gradient in block {name}")


@dataclass
class Batch:
    """Everything one objective evaluation needs; draws are already materialized."""

    u: np.ndarray          # (b, d) batch image embeddings
    u_nb: np.ndarray       # (b, d) drawn image neighbor of each row
    words: np.ndarray      # (m, d) semantic space embeddings
    txt_nbrs: np.ndarray   # (b, k_s) word indices of the cross-modal neighbors
    txt_pos: np.ndarray    # (b,) drawn positive word index
    proto_u: np.ndarray | None = None  # rows used for image prototypes; None -> u


# --------------------------------------------------------------------------
# standalone terms


def _neighbor_rows(neighbors, draws) -> np.ndarray:
    idx = neighbors.indices if isinstance(neighbors, NeighborIndex) else np.asarray(neighbors)
    draws = np.asarray(draws, dtype=np.int64)
    return idx[np.arange(idx.shape[0]), draws]


def _log_clamped(x):
    return np.log(np.maximum(x, EPS))


def balance_term(q: np.ndarray, eta: float, literal: bool = False) -> float:
    """``eta * sum(qbar log qbar)``; ``literal`` flips the sign as printed in the original objective."""
    qbar = np.asarray(q, dtype=np.float64).mean(0)
    val = float(np.sum(qbar * _log_clamped(qbar)))
    return (-eta if literal else eta) * val


def loss_consistency(q: np.ndarray, img_neighbors, draws, eta: float,
                     literal: bool = False) -> float:
    q = np.asarray(q, dtype=np.float64)
    j = _neighbor_rows(img_neighbors, draws)
    dots = np.einsum("ic,ic->i", q, q[j])
    if np.any(dots <= 0):
        raise NumericError("q_i . q_j = 0 for a neighbor pair (log of zero)")
    return float(-np.mean(np.log(dots))) + balance_term(q, eta, literal)


def _masked_contrast(scores: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Per-row ``-(s_pos - logsumexp_{l != pos} s_l)``."""
    rows = np.arange(scores.shape[0])
    masked = scores.copy()
    masked[rows, pos] = -np.inf
    mx = masked.max(1)
    lse = mx + np.log(np.exp(masked - mx[:, None]).sum(1))
    return -(scores[rows, pos] - lse)


def loss_instance_align(q, p, cross_neighbors, draws, tau_ia: float) -> float:
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] < 2:
        raise DataError("instance alignment needs at least two texts")
    pos = _neighbor_rows(cross_neighbors, draws)
    return float(np.mean(_masked_contrast(q @ p.T / tau_ia, pos)))


def loss_prototype_align(h_img, h_txt, params: ModelParams, tau_pa: float) -> float:
    h_img = np.asarray(h_img, dtype=np.float64)
    if h_img.shape[0] < 2:
        raise DataError("prototype alignment needs c >= 2")
    rho_i = softmax(h_img @ params.phi_w.T + params.phi_b)
    rho_s = softmax(np.asarray(h_txt) @ params.theta_w.T + params.theta_b)
    c = rho_i.shape[0]
    return float(np.mean(_masked_contrast(rho_i @ rho_s.T / tau_pa, np.arange(c))))


def loss_semantic_align(q, q_pseudo) -> float:
    """Cross entropy with the one-hot pseudo-label as target."""
    q = np.asarray(q, dtype=np.float64)
    return float(-np.mean(np.sum(np.asarray(q_pseudo) * _log_clamped(q), axis=1)))


def loss_attention_train(q, p_prime) -> float:
    """Cross entropy of the attention output against the detached image assignment."""
    return float(-np.mean(np.sum(np.asarray(q) * _log_clamped(np.asarray(p_prime)), axis=1)))


# --------------------------------------------------------------------------
# combined forward / backward


def _softmax_back(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    return s * (g - np.sum(g * s, axis=-1, keepdims=True))


def _masked_contrast_grad(scores: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """d/dscores of ``_masked_contrast`` per row."""
    rows = np.arange(scores.shape[0])
    masked = scores.copy()
    masked[rows, pos] = -np.inf
    g = softmax(masked, axis=1)
    g[rows, pos] = -1.0
    return g


def _dlog_clamped(x):
    return np.where(x > EPS, 1.0 / np.maximum(x, EPS), 0.0)


class _Reducer:
    """``a.T @ b`` summed over fixed row blocks in a fixed order (worker-count independent)."""

    def __init__(self, workers: int = 1):
        self.pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def tn(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        starts = range(0, a.shape[0], REDUCE_BLOCK)
        fn = lambda s: a[s:s + REDUCE_BLOCK].T @ b[s:s + REDUCE_BLOCK]
        parts = list(self.pool.map(fn, starts)) if self.pool else [fn(s) for s in starts]
        out = np.zeros((a.shape[1], b.shape[1]))
        for p in parts:
            out += p
        return out

    def colsum(self, a: np.ndarray) -> np.ndarray:
        out = np.zeros(a.shape[1])
        for s in range(0, a.shape[0], REDUCE_BLOCK):
            out += a[s:s + REDUCE_BLOCK].sum(0)
        return out

    def close(self):
        if self.pool:
            self.pool.shutdown()


@dataclass
class ForwardState:
    q: np.ndarray
    p: np.ndarray
    p_prime: np.ndarray
    q_pseudo: np.ndarray
    h_img: np.ndarray
    h_txt: np.ndarray
    txt_source: np.ndarray  # (c, k_p) word indices averaged into each text prototype


def loss_and_grad(batch: Batch, params: ModelParams, config, need_grad: bool = True,
                  workers: int = 1, frozen: "ForwardState | None" = None):
    """Evaluate the total objective and (optionally) its exact gradient.

    Pseudo-labels, the word neighborhoods behind the text prototypes and the
    attention-training target are constants of the objective (argmax /
    nearest-neighbor picks and a stop-gradient). Passing ``frozen`` (a
    ForwardState from the same point) pins all three, so a finite difference
    check evaluates exactly the function the analytic gradient describes.

    Returns ``(LossBreakdown, GradientSet | None, ForwardState)``.
    """
    cfg = config
    u = np.asarray(batch.u, dtype=np.float64)
    u_nb = np.asarray(batch.u_nb, dtype=np.float64)
    v = np.asarray(batch.words, dtype=np.float64)
    nbrs = np.asarray(batch.txt_nbrs, dtype=np.int64)
    pos = np.asarray(batch.txt_pos, dtype=np.int64)
    b, c = u.shape[0], params.c
    if v.shape[0] < 2:
        raise DataError("semantic space needs at least two words")
    la, lpa, lsa = cfg.lambda_a, cfg.lambda_pa, cfg.lambda_sa
    sign = -1.0 if cfg.paper_literal_entropy else 1.0

    # forward
    q = softmax(u @ params.phi_w.T + params.phi_b)
    r = softmax(u_nb @ params.phi_w.T + params.phi_b)
    p = softmax(v @ params.theta_w.T + params.theta_b)

    dots = np.einsum("ic,ic->i", q, r)
    if np.any(dots <= 0):
        raise NumericError("q_i . q_j = 0 for a neighbor pair (log of zero)")
    l_cons = float(-np.mean(np.log(dots)))
    qbar = q.mean(0)
    l_ent = sign * cfg.eta * float(np.sum(qbar * _log_clamped(qbar)))

    s_ia = q @ p.T / cfg.tau_ia
    l_ia = float(np.mean(_masked_contrast(s_ia, pos)))

    shared_proto = batch.proto_u is None
    pu = u if shared_proto else np.asarray(batch.proto_u, dtype=np.float64)
    qp = q if shared_proto else softmax(pu @ params.phi_w.T + params.phi_b)
    mass = qp.sum(0)
    if np.any(mass <= 0):
        raise NumericError(f"cluster {int(np.argmin(mass))} has zero assignment mass")
    h_img = qp.T @ pu / mass[:, None]
    tp_idx = frozen.txt_source if frozen is not None else nearest_word_neighborhoods(h_img, v, cfg.k_p)
    h_txt = v[tp_idx].mean(1)
    h_txt /= np.linalg.norm(h_txt, axis=1, keepdims=True)
    rho_i = softmax(h_img @ params.phi_w.T + params.phi_b)
    rho_s = softmax(h_txt @ params.theta_w.T + params.theta_b)
    m_pa = rho_i @ rho_s.T / cfg.tau_pa
    l_pa = float(np.mean(_masked_contrast(m_pa, np.arange(c)))) if c >= 2 else 0.0

    x_att = u @ params.w_img.T
    y_att = v @ params.w_txt.T
    scores = np.einsum("bd,bkd->bk", x_att, y_att[nbrs])
    alpha = softmax(scores, axis=1)
    p_n = p[nbrs]                              # (b, k, c)
    p_prime = np.einsum("bk,bkc->bc", alpha, p_n)
    q_pseudo = frozen.q_pseudo if frozen is not None else pseudo_label(p_prime)

    l_sa_ce = float(-np.mean(np.sum(q_pseudo * _log_clamped(q), 1)))
    q_target = q if frozen is None else frozen.q
    l_att = float(-np.mean(np.sum(q_target * _log_clamped(p_prime), 1)))
    l_sem = l_sa_ce + l_att
    l_total = l_cons + l_ent + la * (l_ia + lpa * l_pa + lsa * l_sem)
    losses = LossBreakdown(l_cons, l_ent, l_ia, l_pa, l_sem, l_total, l_sa_ce, l_att)
    state = ForwardState(q, p, p_prime, q_pseudo, h_img, h_txt, tp_idx)
    if not np.isfinite(l_total):
        raise NumericError("non-finite total loss")
    if not need_grad:
        return losses, None, state

    red = _Reducer(workers)
    try:
        dq = np.zeros_like(q)
        dr = np.zeros_like(r)
        dp = np.zeros_like(p)
        dqp = dq if shared_proto else np.zeros_like(qp)

        # neighbor consistency and balance
        dq -= r / (b * dots[:, None])
        dr -= q / (b * dots[:, None])
        dq += sign * cfg.eta * (_log_clamped(qbar) + np.where(qbar > EPS, 1.0, 0.0)) / b

        # instance alignment
        if la:
            g = _masked_contrast_grad(s_ia, pos) * (la / (b * cfg.tau_ia))
            dq += g @ p
            dp += g.T @ q

        # prototype alignment
        d_phi_w = np.zeros_like(params.phi_w)
        d_phi_b = np.zeros_like(params.phi_b)
        d_theta_w = np.zeros_like(params.theta_w)
        d_theta_b = np.zeros_like(params.theta_b)
        if la and lpa and c >= 2:
            gm = _masked_contrast_grad(m_pa, np.arange(c)) * (la * lpa / (c * cfg.tau_pa))
            dz_i = _softmax_back(rho_i, gm @ rho_s)
            dz_s = _softmax_back(rho_s, gm.T @ rho_i)
            d_phi_w += dz_i.T @ h_img
            d_phi_b += dz_i.sum(0)
            d_theta_w += dz_s.T @ h_txt
            d_theta_b += dz_s.sum(0)
            dh = dz_i @ params.phi_w                   # (c, d)
            # h_l = sum_i qp_il u_i / mass_l
            dqp += (pu @ dh.T - np.sum(h_img * dh, 1)[None, :]) / mass[None, :]

        # semantic alignment and attention training
        d_w_img = np.zeros_like(params.w_img)
        d_w_txt = np.zeros_like(params.w_txt)
        if la and lsa:
            w = la * lsa / b
            dq -= w * q_pseudo * _dlog_clamped(q)
            dpp = -w * q_target * _dlog_clamped(p_prime)
            d_alpha = np.einsum("bc,bkc->bk", dpp, p_n)
            np.add.at(dp, nbrs, alpha[:, :, None] * dpp[:, None, :])
            d_scores = alpha * (d_alpha - np.sum(alpha * d_alpha, 1, keepdims=True))
            dx = np.einsum("bk,bkd->bd", d_scores, y_att[nbrs])
            dy = np.zeros_like(y_att)
            np.add.at(dy, nbrs, d_scores[:, :, None] * x_att[:, None, :])
            d_w_img = red.tn(dx, u)
            d_w_txt = red.tn(dy, v)

        dz_q = _softmax_back(q, dq)
        dz_r = _softmax_back(r, dr)
        dz_p = _softmax_back(p, dp)
        d_phi_w += red.tn(dz_q, u) + red.tn(dz_r, u_nb)
        d_phi_b += red.colsum(dz_q) + red.colsum(dz_r)
        if not shared_proto:
            dz_qp = _softmax_back(qp, dqp)
            d_phi_w += red.tn(dz_qp, pu)
            d_phi_b += red.colsum(dz_qp)
        d_theta_w += red.tn(dz_p, v)
        d_theta_b += red.colsum(dz_p)
    finally:
        red.close()

    if not cfg.bias:
        d_phi_b[:] = 0.0
        d_theta_b[:] = 0.0
    grads = GradientSet(d_phi_w, d_phi_b, d_theta_w, d_theta_b, d_w_img, d_w_txt)
    grads.check_finite()
    return losses, grads, state


def loss_total(batch: Batch, params: ModelParams, config) -> LossBreakdown:
    return loss_and_grad(batch, params, config, need_grad=False)[0]


def grad_total(batch: Batch, params: ModelParams, config, workers: int = 1) -> GradientSet:
    return loss_and_grad(batch, params, config, workers=workers)[1]
