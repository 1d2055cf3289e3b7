"""Semantic space construction: k-means centers, uniqueness and hierarchy filtering."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .embedding_io import (DatasetBundle, EmbeddingMatrix, TaxonomyTree,
                           VocabularyBundle, l2_normalize)
from .errors import DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: tuple[float, ...] = ()


@dataclass
class SemanticSpace:
    kept_words: tuple[str, ...]
    kept_embeddings: EmbeddingMatrix | None
    provenance: dict[str, tuple[str, ...]] = field(default_factory=dict)
    report: list[tuple[str, int, int]] = field(default_factory=list)
    centers: np.ndarray | None = None
    scores: np.ndarray | None = None   # uniqueness score of every vocabulary word
    candidates: tuple[str, ...] = ()   # survivors of the uniqueness stage

    def __len__(self) -> int:
        return len(self.kept_words)

    def format_report(self) -> str:
        lines = [f"{'stage':<12} {'kept':>8} {'dropped':>8}"]
        lines += [f"{s:<12} {k:>8d} {d:>8d}" for s, k, d in self.report]
        return "\n".join(lines)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, np.asarray(centers))[:, 0]
    for _ in range(1, c):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.asarray(centers)


def kmeans_fit(m: EmbeddingMatrix | np.ndarray, c: int, seed: int = 0,
               max_iter: int = 300, tol: float = 1e-8) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding (Euclidean distance).

    An empty cluster is re-seeded at the point farthest from its current
    center, which keeps the run deterministic for a given seed.
    """
    x = np.asarray(m.data if isinstance(m, EmbeddingMatrix) else m, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= c <= n:
        raise DataError(f"k-means needs 1 <= c <= n, got c={c}, n={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, c, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        dist = _sq_dists(x, centers)
        assign = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(n), assign].sum()))
        new = np.empty_like(centers)
        for l in range(c):
            members = assign == l
            if members.any():
                new[l] = x[members].mean(0)
            else:
                far = int(np.argmax(dist[np.arange(n), assign]))
                new[l] = x[far]
                assign[far] = l
        shift = float(np.sqrt(((new - centers) ** 2).sum(1)).max())
        centers = new
        if shift < tol:
            break
    dist = _sq_dists(x, centers)
    assign = np.argmin(dist, axis=1)
    inertia = float(dist[np.arange(n), assign].sum())
    return KMeansResult(centers, assign, inertia, it, tuple(history))


def _unit_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _vocab_matrix(vocab) -> np.ndarray:
    if isinstance(vocab, VocabularyBundle):
        vocab = vocab.embeddings
    if isinstance(vocab, EmbeddingMatrix):
        vocab = vocab.data
    return np.asarray(vocab, dtype=np.float64)


def uniqueness_scores(vocab, centers: np.ndarray) -> np.ndarray:
    """Margin between a word's best and second-best cosine to the image centers."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[0] < 2:
        raise DataError("uniqueness scores need at least two centers")
    sims = _unit_rows(_vocab_matrix(vocab)) @ _unit_rows(centers).T
    top2 = -np.sort(-sims, axis=1)[:, :2]
    return top2[:, 0] - top2[:, 1]


def uniqueness_filter(vocab, centers: np.ndarray, rho_u: float, gamma_r: int,
                      score_fn: Callable = uniqueness_scores) -> np.ndarray:
    """Indices (vocabulary order) of the union of each center's ``gamma_r`` nearest unique words."""
    if rho_u < 0 or gamma_r < 1:
        raise DataError("need rho_u >= 0 and gamma_r >= 1")
    v = _unit_rows(_vocab_matrix(vocab))
    unique = np.flatnonzero(score_fn(v, centers) > rho_u)
    if unique.size == 0:
        raise DataError(f"no word has uniqueness above rho_u={rho_u}; lower rho_u")
    sims = _unit_rows(centers) @ v[unique].T
    keep = np.zeros(v.shape[0], dtype=bool)
    for row in sims:
        order = np.argsort(-row, kind="stable")[:gamma_r]
        keep[unique[order]] = True
    return np.flatnonzero(keep)


def hierarchy_filter(candidates: Sequence[str], tree: TaxonomyTree, gamma_h: int,
                     warn: bool = True) -> list[str]:
    """Drop candidates at depth 1..gamma_h; keep deeper words and orphans."""
    kept = [w for w in candidates if not 1 <= tree.depth_of(w) <= gamma_h]
    if warn and candidates and not kept:
        log.warning("hierarchy filter with gamma_h=%d removed every candidate", gamma_h)
    return kept


def build_semantic_space(dataset: DatasetBundle, vocab: VocabularyBundle, config,
                         tree: TaxonomyTree | None = None) -> SemanticSpace:
    """k-means centers, then uniqueness filtering, then hierarchy filtering.

    ``config`` needs ``c``, ``rho_u``, ``gamma_r``, ``gamma_h`` and ``seed``.
    """
    images = l2_normalize(dataset.images)
    words = l2_normalize(vocab.embeddings)
    tree = tree or vocab.tree()
    km = kmeans_fit(images, config.c, seed=config.seed)
    centers = _unit_rows(km.centers)

    m = len(vocab.words)
    wc_idx = uniqueness_filter(words, centers, config.rho_u, config.gamma_r)
    wc = [vocab.words[i] for i in wc_idx]
    kept = set(hierarchy_filter(wc, tree, config.gamma_h))
    kept_idx = [i for i in wc_idx if vocab.words[i] in kept]
    if not kept_idx:
        raise DataError("semantic space is empty after hierarchy filtering; lower gamma_h")

    provenance = {}
    wc_set = set(wc)
    for w in vocab.words:
        stages = ("vocabulary",)
        if w in wc_set:
            stages += ("uniqueness",)
        if w in kept:
            stages += ("hierarchy",)
        provenance[w] = stages
    report = [
        ("vocabulary", m, 0),
        ("uniqueness", len(wc_idx), m - len(wc_idx)),
        ("hierarchy", len(kept_idx), len(wc_idx) - len(kept_idx)),
    ]
    return SemanticSpace(tuple(vocab.words[i] for i in kept_idx), words.take(kept_idx),
                         provenance, report, centers, uniqueness_scores(words, centers), tuple(wc))


def word_table(vocab: VocabularyBundle, tree: TaxonomyTree, scores: np.ndarray,
               space: SemanticSpace) -> list[tuple[str, float, float, bool]]:
    kept = set(space.kept_words)
    return [(w, tree.depth_of(w), float(s), w in kept) for w, s in zip(vocab.words, scores)]


def write_word_table(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["word", "depth", "uniqueness", "kept"])
        for word, depth, score, kept in rows:
            w.writerow([word, "inf" if math.isinf(depth) else int(depth), f"{score:.6f}", int(kept)])


def vocabulary_size_curve(candidates: Sequence[str], tree: TaxonomyTree,
                          gammas: Sequence[int]) -> list[int]:
    """|T| after hierarchy filtering for each gamma_h."""
    return [len(hierarchy_filter(candidates, tree, g, warn=False)) for g in gammas]
