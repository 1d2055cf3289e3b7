"""Pseudo-label quality of three labelers tracked over training.

SMP   argmax of the image head alone.
PMCP  nearest text prototype in the frozen embedding space.
MCA   attention-weighted vote of the neighboring texts' assignments.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .embedding_io import DatasetBundle, VocabularyBundle
from .errors import DataError
from .metrics import accuracy_hungarian
from .model import (ModelParams, PrototypePair, attention_combine, build_prototypes,
                    image_assign, pseudo_label, text_assign)
from .semantic_space import build_semantic_space
from .trainer import Prepared, TrainState, train

METHODS = ("SMP", "PMCP", "MCA")


@dataclass
class LabelerRun:
    method: str
    seed: int
    trace: list[float] = field(default_factory=list)


def label_smp(q: np.ndarray) -> np.ndarray:
    return pseudo_label(q)


def label_pmcp(u: np.ndarray, protos: PrototypePair | np.ndarray) -> np.ndarray:
    """One-hot label of the nearest (cosine) text prototype for each image."""
    h_txt = protos.text if isinstance(protos, PrototypePair) else protos
    h_txt = np.asarray(h_txt, dtype=np.float64)
    if h_txt.size == 0:
        raise DataError("no text prototypes")
    h = h_txt / np.linalg.norm(h_txt, axis=1, keepdims=True)
    return pseudo_label(np.asarray(u, dtype=np.float64) @ h.T)


def label_mca(params: ModelParams, u: np.ndarray, words: np.ndarray,
              txt_nbrs: np.ndarray) -> np.ndarray:
    p = text_assign(params, words)
    p_prime = attention_combine(u, words[txt_nbrs], p[txt_nbrs], params.w_img, params.w_txt)
    return pseudo_label(p_prime)


def labeler_accuracies(params: ModelParams, prep: Prepared, truth: np.ndarray,
                       k_p: int) -> dict[str, float]:
    q = image_assign(params, prep.u)
    protos = build_prototypes(q, prep.u, prep.words, k_p)
    labels = {
        "SMP": label_smp(q),
        "PMCP": label_pmcp(prep.u, protos),
        "MCA": label_mca(params, prep.u, prep.words, prep.txt_nbrs.indices),
    }
    return {k: accuracy_hungarian(np.argmax(v, 1), truth) for k, v in labels.items()}


def run_bench(dataset: DatasetBundle, vocab: VocabularyBundle, config: TrainConfig,
              repeats: int = 1, seeds=None) -> list[LabelerRun]:
    """Train once per seed, scoring all three labelers after every epoch."""
    if dataset.labels is None:
        raise DataError("the pseudo-label benchmark needs ground-truth labels")
    seeds = list(seeds) if seeds is not None else [config.seed + r for r in range(repeats)]
    runs: list[LabelerRun] = []
    for seed in seeds:
        cfg = config.replace(seed=seed)
        space = build_semantic_space(dataset, vocab, cfg)
        per_seed = {m: LabelerRun(m, seed) for m in METHODS}

        def snapshot(epoch: int, state: TrainState, prep: Prepared) -> None:
            accs = labeler_accuracies(state.params, prep, dataset.labels, cfg.k_p)
            for m in METHODS:
                per_seed[m].trace.append(accs[m])

        train(dataset, space.kept_embeddings, cfg, callback=snapshot)
        runs.extend(per_seed[m] for m in METHODS)
    return runs


def mean_traces(runs: list[LabelerRun]) -> dict[str, np.ndarray]:
    return {m: np.mean([r.trace for r in runs if r.method == m], axis=0)
            for m in METHODS if any(r.method == m for r in runs)}


def final_accuracy(runs: list[LabelerRun]) -> dict[str, float]:
    return {m: float(t[-1]) for m, t in mean_traces(runs).items()}


def write_bench_csv(path, runs: list[LabelerRun]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "epoch", "acc"])
        for r in runs:
            for epoch, acc in enumerate(r.trace):
                w.writerow([r.method, r.seed, epoch, repr(float(acc))])
