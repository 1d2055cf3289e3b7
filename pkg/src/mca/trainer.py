"""Mini-batch training of the image/text heads and attention matrices."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig
from .embedding_io import DatasetBundle, EmbeddingMatrix, l2_normalize
from .errors import DataError, NumericError
from .knn import NeighborIndex, topk_cross_modal, topk_in_modal
from .losses import Batch, LossBreakdown, loss_and_grad
from .metrics import metric_report
from .model import ModelParams, image_assign, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "l_I", "l_ia", "l_pa", "l_sa", "l_total"]


@dataclass
class TrainState:
    params: ModelParams
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    history: list[LossBreakdown] = field(default_factory=list)


@dataclass
class Prepared:
    """Frozen inputs of a run: normalized embeddings and precomputed neighborhoods."""

    u: np.ndarray
    words: np.ndarray
    img_nbrs: NeighborIndex
    txt_nbrs: NeighborIndex


@dataclass
class TrainResult:
    state: TrainState
    prepared: Prepared
    q: np.ndarray
    assignments: np.ndarray


def split_indices(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random train / held-out split; held-out gets ``round(holdout * n)`` rows."""
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(holdout * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def sample_batch(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of batches: a shuffled partition of ``range(n)``."""
    if not 1 <= batch_size <= n:
        raise DataError(f"batch size {batch_size} outside [1, {n}]")
    perm = rng.permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


def prepare(images: EmbeddingMatrix, space_embeddings: EmbeddingMatrix, config: TrainConfig) -> Prepared:
    images = l2_normalize(images)
    words = l2_normalize(space_embeddings)
    if config.k_s > words.n:
        raise DataError(f"k_s={config.k_s} exceeds semantic space size {words.n}")
    if config.k_p > words.n:
        raise DataError(f"k_p={config.k_p} exceeds semantic space size {words.n}")
    img_nbrs = topk_in_modal(images, config.k_i, workers=config.workers)
    txt_nbrs = topk_cross_modal(images, words, config.k_s, workers=config.workers)
    return Prepared(images.data.astype(np.float64), words.data.astype(np.float64),
                    img_nbrs, txt_nbrs)


def _update(state: TrainState, grads, config: TrainConfig) -> None:
    t = state.step + 1
    for name, p in state.params.blocks().items():
        g = getattr(grads, name)
        if config.optimizer == "sgd":
            p -= config.lr * g
            continue
        m, v = state.moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        state.moments[name] = (m, v)
        m_hat = m / (1 - config.beta1 ** t)
        v_hat = v / (1 - config.beta2 ** t)
        p -= config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def make_batch(prep: Prepared, idx: np.ndarray, rng: np.random.Generator,
               config: TrainConfig) -> Batch:
    b = idx.size
    img_draw = rng.integers(config.k_i, size=b)
    txt_draw = rng.integers(config.k_s, size=b)
    nb = prep.img_nbrs.indices[idx, img_draw]
    txt = prep.txt_nbrs.indices[idx]
    proto = prep.u if config.prototype_mode == "full" else None
    return Batch(prep.u[idx], prep.u[nb], prep.words, txt, txt[np.arange(b), txt_draw], proto)


def save_state(path, state: TrainState) -> None:
    arrays = {f"param_{k}": v for k, v in state.params.blocks().items()}
    for k, (m, v) in state.moments.items():
        arrays[f"m_{k}"] = m
        arrays[f"v_{k}"] = v
    meta = {"step": state.step, "epoch": state.epoch, "rng": state.rng.bit_generator.state,
            "history": [list(h.__dict__.values()) for h in state.history]}
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_state(path) -> TrainState:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        params = ModelParams(**{k[6:]: z[k].copy() for k in z.files if k.startswith("param_")})
        moments = {k[2:]: (z[k].copy(), z["v_" + k[2:]].copy()) for k in z.files if k.startswith("m_")}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    history = [LossBreakdown(*h) for h in meta["history"]]
    return TrainState(params, rng, meta["step"], meta["epoch"], moments, history)


def _log_row(step: int, h: LossBreakdown) -> list[str]:
    return [str(step)] + [repr(x) for x in (h.l_image, h.l_instance, h.l_prototype,
                                            h.l_semantic, h.l_total)]


def write_train_log(path, history: list[LossBreakdown]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for step, h in enumerate(history, start=1):
            w.writerow(_log_row(step, h))


def train(dataset: DatasetBundle, space_embeddings: EmbeddingMatrix, config: TrainConfig,
          run_dir=None, callback: Callable[[int, TrainState, Prepared], None] | None = None,
          resume=None, params: ModelParams | None = None) -> TrainResult:
    """Optimize the full objective; returns final state and train-set assignments.

    ``callback(epoch, state, prepared)`` runs after every epoch (epoch 0 is
    the untrained model). A non-finite loss raises NumericError after the
    last good state has been checkpointed to ``run_dir``.
    """
    config.validate()
    prep = prepare(dataset.images, space_embeddings, config)
    n, d = prep.u.shape
    if config.batch_size > n:
        raise DataError(f"batch size {config.batch_size} exceeds {n} training images")
    if resume is not None:
        state = load_state(resume)
    else:
        p0 = params.copy() if params is not None else init_params(config.c, d, config.seed, config.bias)
        state = TrainState(p0, np.random.default_rng(config.seed))
    state.params.validate()
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    if callback is not None and state.epoch == 0:
        callback(0, state, prep)
    last_good = state.params.copy()
    while state.epoch < config.epochs:
        for idx in sample_batch(n, config.batch_size, state.rng):
            batch = make_batch(prep, idx, state.rng, config)
            try:
                losses, grads, _ = loss_and_grad(batch, state.params, config, workers=config.workers)
            except NumericError:
                if run_dir is not None:
                    state.params = last_good
                    save_checkpoint(run_dir / "checkpoints" / "last_good.mcap", last_good)
                raise
            last_good = state.params.copy()
            _update(state, grads, config)
            state.step += 1
            state.history.append(losses)
        state.epoch += 1
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / f"epoch_{state.epoch:03d}.mcap", state.params)
            save_state(run_dir / "checkpoints" / "state.npz", state)
        if callback is not None:
            callback(state.epoch, state, prep)

    q = image_assign(state.params, prep.u)
    if run_dir is not None:
        save_checkpoint(run_dir / "params.mcap", state.params)
        write_train_log(run_dir / "train_log.csv", state.history)
    return TrainResult(state, prep, q, np.argmax(q, axis=1))


def predict(params: ModelParams, images: EmbeddingMatrix) -> np.ndarray:
    return np.argmax(image_assign(params, l2_normalize(images).data.astype(np.float64)), axis=1)


def evaluate(params: ModelParams | str | Path, dataset: DatasetBundle) -> dict[str, float]:
    """ACC / NMI / ARI of the image head's argmax on ``dataset``."""
    if dataset.labels is None:
        raise DataError("evaluation needs ground-truth labels")
    if not isinstance(params, ModelParams):
        params = load_checkpoint(params)
    return metric_report(predict(params, dataset.images), dataset.labels)
