"""Paired image/word embedding datasets with known clusters and a synthetic taxonomy.

Cluster directions are orthonormal (QR of a Gaussian draw). Images and words
are ``separation * direction + noise``, row-normalized. A ``misalignment``
fraction of each cluster's leaf words is embedded near a different
cluster's direction while keeping its own taxonomy lineage, which mimics a
pretrained model pairing an image with the wrong noun.

Taxonomy: ROOT -> shared ancestors (levels 1..n_shared, common to every
cluster, embedded near the global mean) -> per-cluster chain -> leaf words
at depth ``taxonomy_depth``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embedding_io import (ROOT, DatasetBundle, EmbeddingMatrix, VocabularyBundle,
                           save_embeddings, save_taxonomy)
from .errors import DataError


@dataclass
class SynthConfig:
    c: int = 3
    n_img: int = 200              # images per cluster
    words_per_cluster: int = 40   # leaf words per cluster
    d: int = 64
    separation: float = 1.0
    noise: float = 0.15
    word_noise: float | None = None  # defaults to ``noise``
    misalignment: float = 0.0
    misalign_pull: float = 0.0    # share of the true direction kept by a misaligned word
    taxonomy_depth: int = 12
    n_shared: int | None = None   # shared ancestor levels; defaults to depth // 2
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.misalignment <= 1.0:
            raise DataError("misalignment must lie in [0, 1]")
        if self.separation <= 0:
            raise DataError("separation must be positive")
        if self.c < 1 or self.n_img < 1 or self.words_per_cluster < 1:
            raise DataError("c, n_img and words_per_cluster must be positive")
        if self.c > self.d:
            raise DataError(f"cannot place {self.c} orthogonal directions in d={self.d}")
        if self.taxonomy_depth < 1:
            raise DataError("taxonomy depth must be >= 1")


@dataclass
class GroundTruth:
    word_lineage: dict[str, int]      # cluster whose taxonomy branch holds the word (-1: shared)
    word_embedded: dict[str, int]     # cluster whose direction the embedding was drawn near
    misaligned: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def cluster_directions(c: int, d: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(d, c)))
    return q.T.copy()


def generate(config: SynthConfig):
    """Return ``(DatasetBundle, VocabularyBundle, GroundTruth)``; pure given the seed."""
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    c, d = cfg.c, cfg.d
    wn = cfg.noise if cfg.word_noise is None else cfg.word_noise
    dirs = cluster_directions(c, d, rng)

    labels = np.repeat(np.arange(c), cfg.n_img)
    imgs = _unit(cfg.separation * dirs[labels] + cfg.noise * rng.normal(size=(labels.size, d)))
    images = EmbeddingMatrix(imgs.astype(np.float32), tuple(f"img{i}" for i in range(labels.size)))
    dataset = DatasetBundle(images, labels, c)

    depth = cfg.taxonomy_depth
    n_shared = depth // 2 if cfg.n_shared is None else cfg.n_shared
    n_shared = min(n_shared, depth - 1)
    words: list[str] = []
    vecs: list[np.ndarray] = []
    edges: list[tuple[str, str]] = []
    lineage: dict[str, int] = {}
    embedded: dict[str, int] = {}

    center = dirs.mean(0)
    parent = ROOT
    for level in range(1, n_shared + 1):
        name = f"shared_l{level}"
        words.append(name)
        vecs.append(cfg.separation * center + wn * rng.normal(size=d))
        edges.append((name, parent))
        lineage[name] = embedded[name] = -1
        parent = name
    shared_top = parent

    misaligned: list[str] = []
    for k in range(c):
        parent = shared_top
        for level in range(n_shared + 1, depth):
            name = f"c{k}_l{level}"
            words.append(name)
            vecs.append(cfg.separation * dirs[k] + wn * rng.normal(size=d))
            edges.append((name, parent))
            lineage[name] = embedded[name] = k
            parent = name
        n_bad = int(round(cfg.misalignment * cfg.words_per_cluster)) if c > 1 else 0
        bad = set(rng.choice(cfg.words_per_cluster, size=n_bad, replace=False).tolist())
        for i in range(cfg.words_per_cluster):
            name = f"c{k}_w{i}"
            target = k
            if i in bad:
                target = int(rng.choice([j for j in range(c) if j != k]))
                misaligned.append(name)
            base = dirs[target] + (cfg.misalign_pull * dirs[k] if target != k else 0.0)
            words.append(name)
            vecs.append(cfg.separation * base + wn * rng.normal(size=d))
            edges.append((name, parent))
            lineage[name] = k
            embedded[name] = target

    emb = EmbeddingMatrix(_unit(np.asarray(vecs)).astype(np.float32), tuple(words))
    vocab = VocabularyBundle(tuple(words), emb, tuple(edges))
    return dataset, vocab, GroundTruth(lineage, embedded, misaligned)


def write_bundle(out_dir, dataset: DatasetBundle, vocab: VocabularyBundle, truth: GroundTruth,
                 config: SynthConfig | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"images": out / "images.mcae", "words": out / "words.mcae",
             "taxonomy": out / "taxonomy.tsv", "truth": out / "truth.json"}
    save_embeddings(paths["images"], dataset.images, dataset.labels, dataset.c)
    lineage = [truth.word_lineage[w] for w in vocab.words]
    save_embeddings(paths["words"], vocab.embeddings, extra={"lineage": lineage})
    save_taxonomy(paths["taxonomy"], vocab.taxonomy_edges)
    paths["truth"].write_text(truth.to_json())
    if config is not None:
        (out / "synth_config.json").write_text(json.dumps(asdict(config), sort_keys=True))
    return paths


def nearest_word_labels(dataset: DatasetBundle, vocab: VocabularyBundle, truth: GroundTruth,
                        leaves_only: bool = True) -> np.ndarray:
    """Zero-shot labeling: each image takes the lineage cluster of its nearest word."""
    keep = [i for i, w in enumerate(vocab.words)
            if truth.word_lineage[w] >= 0 and (not leaves_only or "_w" in w)]
    v = vocab.embeddings.data[keep].astype(np.float64)
    nearest = np.argmax(dataset.images.data.astype(np.float64) @ v.T, axis=1)
    lin = np.array([truth.word_lineage[vocab.words[i]] for i in keep])
    return lin[nearest]
