"""Central finite-difference oracle for the analytic gradients.

Each objective term is isolated as the difference between a config that
includes it and one that does not, so its gradient is checked on its own.
Discrete choices (pseudo-labels, prototype word picks, detached targets)
are pinned to the unperturbed forward pass.
"""
import numpy as np

from mca.config import TrainConfig
from mca.losses import Batch, loss_and_grad
from mca.model import init_params

STEP = 1e-4
FLOOR = 1e-6  # magnitude below which the relative error is measured against FLOOR

BASE = dict(c=4, k_p=3, tau_ia=0.05, tau_pa=0.6)
FULL = dict(eta=10.0, lambda_a=1.0, lambda_pa=1.0, lambda_sa=5.0)

# term name -> (LossBreakdown field, config containing the term, config without it)
TERMS = {
    "L_I": ("l_image", dict(eta=10.0, lambda_a=0.0), None),
    "L_ia": ("l_instance", dict(eta=0.0, lambda_a=1.0, lambda_pa=0.0, lambda_sa=0.0),
             dict(eta=0.0, lambda_a=0.0)),
    "L_pa": ("l_prototype", dict(eta=0.0, lambda_a=1.0, lambda_pa=1.0, lambda_sa=0.0),
             dict(eta=0.0, lambda_a=1.0, lambda_pa=0.0, lambda_sa=0.0)),
    "L_sa": ("l_semantic", dict(eta=0.0, lambda_a=1.0, lambda_pa=0.0, lambda_sa=1.0),
             dict(eta=0.0, lambda_a=1.0, lambda_pa=0.0, lambda_sa=0.0)),
    "total": ("l_total", FULL, None),
}


def unit(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def make_problem(seed, b=8, c=4, d=16, m=12, k_s=3, full_protos=False):
    rng = np.random.default_rng(seed)
    u = unit(rng.normal(size=(b, d)))
    u_nb = unit(rng.normal(size=(b, d)))
    words = unit(rng.normal(size=(m, d)))
    nbrs = np.array([rng.choice(m, k_s, replace=False) for _ in range(b)])
    pos = nbrs[np.arange(b), rng.integers(k_s, size=b)]
    protos = unit(rng.normal(size=(10, d))) if full_protos else None
    params = init_params(c, d, seed)
    # move away from the near-uniform start so every term has a sizeable gradient
    params.phi_w *= 3
    params.theta_w *= 3
    params.w_img += rng.normal(scale=0.3, size=(d, d))
    params.w_txt += rng.normal(scale=0.3, size=(d, d))
    return Batch(u, u_nb, words, nbrs, pos, protos), params


def finite_differences(batch, params, cfg, state):
    """Central differences of every LossBreakdown field, one sweep over all parameters."""
    fields = {f for f, _, _ in TERMS.values()}
    fd = {f: {} for f in fields}
    for name, arr in params.blocks().items():
        for f in fields:
            fd[f][name] = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + STEP
            lp = loss_and_grad(batch, params, cfg, need_grad=False, frozen=state)[0]
            arr[ix] = orig - STEP
            lm = loss_and_grad(batch, params, cfg, need_grad=False, frozen=state)[0]
            arr[ix] = orig
            for f in fields:
                fd[f][name][ix] = (getattr(lp, f) - getattr(lm, f)) / (2 * STEP)
    return fd


def analytic_term_gradient(batch, params, term):
    _, with_kw, without_kw = TERMS[term]
    g = loss_and_grad(batch, params, TrainConfig(**BASE, **with_kw))[1].blocks()
    if without_kw is not None:
        g0 = loss_and_grad(batch, params, TrainConfig(**BASE, **without_kw))[1].blocks()
        g = {k: g[k] - g0[k] for k in g}
    return g


def relative_error(g, fd):
    return float(np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), FLOOR)))


def check_seed(seed, full_protos=False):
    """``{term: {block: max relative error}}`` for one random problem."""
    batch, params = make_problem(seed, full_protos=full_protos)
    cfg = TrainConfig(**BASE, **FULL)
    _, _, state = loss_and_grad(batch, params, cfg)
    fd = finite_differences(batch, params, cfg, state)
    out = {}
    for term, (field, _, _) in TERMS.items():
        g = analytic_term_gradient(batch, params, term)
        out[term] = {k: relative_error(g[k], fd[field][k]) for k in g}
    return out
