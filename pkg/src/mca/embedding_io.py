"""Embedding, label, vocabulary and taxonomy files.

Embedding file layout (all little-endian)::

    b"MCAE" | u32 version (=1) | u32 n | u32 d | n*d float32, row-major

An optional sidecar ``<stem>.meta.json`` carries ``ids``, ``labels`` and ``c``.
Taxonomy files are UTF-8 lines ``child<TAB>parent``; the parent ``ROOT``
marks a top-level node.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, TaxonomyError

MAGIC = b"MCAE"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
ROOT = "ROOT"


@dataclass(frozen=True)
class EmbeddingMatrix:
    data: np.ndarray
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise DataError(f"embedding data must be 2-D, got shape {data.shape}")
        n, d = data.shape
        if n < 1:
            raise DataError("embedding matrix needs at least one row")
        if d < 2:
            raise DataError(f"embedding dimension must be >= 2, got {d}")
        ids = tuple(str(i) for i in self.ids) if self.ids else tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise DataError(f"{len(ids)} ids for {n} rows")
        if len(set(ids)) != n:
            raise DataError("embedding ids are not unique")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def take(self, rows: Sequence[int]) -> "EmbeddingMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddingMatrix(self.data[rows], tuple(self.ids[i] for i in rows))


@dataclass(frozen=True)
class DatasetBundle:
    images: EmbeddingMatrix
    labels: np.ndarray | None = None
    c: int | None = None

    def __post_init__(self):
        if self.labels is None:
            return
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (self.images.n,):
            raise DataError(f"{labels.shape[0]} labels for {self.images.n} images")
        c = self.c if self.c is not None else int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= c:
            raise DataError(f"labels must lie in [0, {c})")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "c", int(c))

    def take(self, rows: Sequence[int]) -> "DatasetBundle":
        labels = None if self.labels is None else self.labels[np.asarray(rows)]
        return DatasetBundle(self.images.take(rows), labels, self.c)


@dataclass(frozen=True)
class VocabularyBundle:
    words: tuple[str, ...]
    embeddings: EmbeddingMatrix
    taxonomy_edges: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if len(self.words) != self.embeddings.n:
            raise DataError(f"{len(self.words)} words for {self.embeddings.n} embeddings")
        known = set(self.words) | {ROOT}
        for child, parent in self.taxonomy_edges:
            for node in (child, parent):
                if node not in known:
                    raise TaxonomyError(f"taxonomy node {node!r} is not a vocabulary word")
        TaxonomyTree.from_edges(self.taxonomy_edges, self.words)

    def tree(self) -> "TaxonomyTree":
        return TaxonomyTree.from_edges(self.taxonomy_edges, self.words)


@dataclass(frozen=True)
class TaxonomyTree:
    """Single-parent forest with per-node depth (ROOT is depth 0)."""

    parent: dict[str, str]
    depth: dict[str, int]
    orphans: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, str]], words: Iterable[str] = ()) -> "TaxonomyTree":
        parent: dict[str, str] = {}
        for child, par in edges:
            if child == ROOT:
                raise TaxonomyError("ROOT cannot have a parent")
            if child in parent and parent[child] != par:
                raise TaxonomyError(
                    f"duplicate parent for {child!r}: {parent[child]!r} and {par!r}")
            parent[child] = par

        depth: dict[str, int] = {ROOT: 0}
        nodes = set(parent) | set(parent.values())
        for start in sorted(nodes):
            chain = []
            node = start
            seen = set()
            while node not in depth:
                if node in seen:
                    raise TaxonomyError(f"cycle detected through {node!r}")
                seen.add(node)
                chain.append(node)
                if node not in parent:
                    # parentless non-ROOT node: a separate tree root
                    depth[node] = 0
                    chain.pop()
                    break
                node = parent[node]
            base = depth[node]
            for k, n in enumerate(reversed(chain), start=1):
                depth[n] = base + k

        orphans = frozenset(w for w in words if w not in depth)
        return cls(parent, depth, orphans)

    def depth_of(self, word: str) -> float:
        """Depth of ``word``; ``inf`` for vocabulary words missing from the edge file."""
        if word in self.depth:
            return float(self.depth[word])
        return math.inf

    @property
    def max_depth(self) -> int:
        return max(self.depth.values())

    def edges(self) -> list[tuple[str, str]]:
        return sorted(self.parent.items())


def l2_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    x = m.data.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DataError(f"cannot normalize zero row {int(zero[0])}")
    return EmbeddingMatrix((x / norms[:, None]).astype(np.float32), m.ids)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def load_embeddings(path) -> EmbeddingMatrix:
    """Read an embedding file; rows are returned exactly as stored (not normalized)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such embedding file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if d == 0:
        raise DataError(f"{path}: embedding dimension is zero")
    count = n * d
    if count > 0xFFFFFFFF:
        raise DataError(f"{path}: n*d = {count} overflows a 32-bit element count")
    payload = len(raw) - _HEADER.size
    if payload < 4 * count:
        raise DataError(f"{path}: truncated payload ({payload} of {4 * count} bytes)")
    if payload > 4 * count:
        raise DataError(f"{path}: {payload - 4 * count} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size).reshape(n, d)

    ids: tuple[str, ...] = ()
    meta = _meta_path(path)
    if meta.exists():
        ids = tuple(json.loads(meta.read_text()).get("ids") or ())
    return EmbeddingMatrix(data.astype(np.float32), ids)


def save_embeddings(path, m: EmbeddingMatrix, labels=None, c=None, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, m.n, m.d))
        fh.write(m.data.astype("<f4").tobytes())
    meta = {"ids": list(m.ids)}
    if labels is not None:
        meta["labels"] = [int(x) for x in labels]
    if c is not None:
        meta["c"] = int(c)
    if extra:
        meta.update(extra)
    _meta_path(path).write_text(json.dumps(meta))


def read_meta(path) -> dict:
    meta = _meta_path(Path(path))
    return json.loads(meta.read_text()) if meta.exists() else {}


def load_dataset(path) -> DatasetBundle:
    images = load_embeddings(path)
    meta = read_meta(path)
    labels = meta.get("labels")
    c = meta.get("c")
    return DatasetBundle(images, None if labels is None else np.asarray(labels), c)


def save_dataset(path, bundle: DatasetBundle) -> None:
    save_embeddings(path, bundle.images, bundle.labels, bundle.c)


def read_taxonomy_edges(path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such taxonomy file: {path}")
    edges = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise TaxonomyError(f"{path}:{lineno}: expected 'child<TAB>parent'")
        edges.append((parts[0], parts[1]))
    return edges


def load_taxonomy(path, words: Iterable[str] = ()) -> TaxonomyTree:
    return TaxonomyTree.from_edges(read_taxonomy_edges(path), words)


def save_taxonomy(path, edges: Iterable[tuple[str, str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{c}\t{p}\n" for c, p in edges), encoding="utf-8")


def load_vocabulary(emb_path, taxonomy_path=None) -> VocabularyBundle:
    emb = load_embeddings(emb_path)
    edges = read_taxonomy_edges(taxonomy_path) if taxonomy_path else []
    return VocabularyBundle(emb.ids, emb, tuple(edges))
