"""Exact top-k cosine neighborhoods, in-modal and cross-modal."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding_io import EmbeddingMatrix
from .errors import DataError

# Query rows are processed in fixed-size blocks so results never depend on
# the worker count.
BLOCK = 256


@dataclass(frozen=True)
class NeighborIndex:
    indices: np.ndarray  # (n_queries, k) int64
    sims: np.ndarray     # (n_queries, k) float64, non-increasing per row
    query_ids: tuple[str, ...] = ()
    key_ids: tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]

    def to_csv(self, path) -> None:
        """Dump as ``query_id,rank,neighbor_id,similarity``."""
        qids = self.query_ids or tuple(str(i) for i in range(len(self)))
        kids = self.key_ids
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", "rank", "neighbor_id", "similarity"])
            for i, (row, sims) in enumerate(zip(self.indices, self.sims)):
                for rank, (j, s) in enumerate(zip(row, sims)):
                    w.writerow([qids[i], rank, kids[j] if kids else int(j), repr(float(s))])


def _topk_block(q: np.ndarray, keys: np.ndarray, inverse: np.ndarray, k: int, offset: int,
                exclude_self: bool):
    # score distinct key rows once so duplicated rows tie exactly (BLAS may
    # round identical rows differently depending on their position)
    sims = np.clip(q @ keys.T, -1.0, 1.0)[:, inverse]
    if exclude_self:
        rows = np.arange(q.shape[0])
        sims[rows, rows + offset] = -np.inf
    # stable sort on the negated similarity keeps lower indices first on ties
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def _topk(queries: np.ndarray, keys: np.ndarray, k: int, exclude_self: bool, workers: int):
    starts = list(range(0, queries.shape[0], BLOCK))
    distinct, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)

    def run(s):
        return _topk_block(queries[s:s + BLOCK], distinct, inverse, k, s, exclude_self)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    idx = np.concatenate([p[0] for p in parts]).astype(np.int64)
    sims = np.concatenate([p[1] for p in parts])
    return idx, sims


def topk_in_modal(m: EmbeddingMatrix, k: int, workers: int = 1) -> NeighborIndex:
    """Top-k rows by dot product for every row of ``m``, excluding the row itself."""
    if not 1 <= k <= m.n - 1:
        raise DataError(f"k={k} outside [1, {m.n - 1}]")
    x = m.data.astype(np.float64)
    idx, sims = _topk(x, x, k, True, workers)
    return NeighborIndex(idx, sims, m.ids, m.ids)


def topk_cross_modal(queries: EmbeddingMatrix, keys: EmbeddingMatrix, k: int,
                     workers: int = 1) -> NeighborIndex:
    """Top-k key rows for every query row; no self exclusion."""
    if queries.d != keys.d:
        raise DataError(f"dimension mismatch: queries d={queries.d}, keys d={keys.d}")
    if not 1 <= k <= keys.n:
        raise DataError(f"k={k} outside [1, {keys.n}]")
    idx, sims = _topk(queries.data.astype(np.float64), keys.data.astype(np.float64),
                      k, False, workers)
    return NeighborIndex(idx, sims, queries.ids, keys.ids)
