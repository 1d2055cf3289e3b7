"""Cluster heads, attention pseudo-labeler and prototypes."""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .embedding_io import EmbeddingMatrix
from .errors import DataError, NumericError

CKPT_MAGIC = b"MCAP"
CKPT_VERSION = 1


@dataclass
class ModelParams:
    phi_w: np.ndarray    # (c, d) image head
    phi_b: np.ndarray    # (c,)
    theta_w: np.ndarray  # (c, d) text head
    theta_b: np.ndarray  # (c,)
    w_img: np.ndarray    # (d, d)
    w_txt: np.ndarray    # (d, d)

    @property
    def c(self) -> int:
        return self.phi_w.shape[0]

    @property
    def d(self) -> int:
        return self.phi_w.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.blocks().items()})

    def validate(self) -> None:
        c, d = self.c, self.d
        shapes = {"phi_w": (c, d), "phi_b": (c,), "theta_w": (c, d), "theta_b": (c,),
                  "w_img": (d, d), "w_txt": (d, d)}
        for name, arr in self.blocks().items():
            if arr.shape != shapes[name]:
                raise DataError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} has non-finite entries")


def init_params(c: int, d: int, seed: int = 0, bias: bool = True) -> ModelParams:
    """Heads ~ U(-1/sqrt(d), 1/sqrt(d)); attention matrices start at the identity."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    phi_w = rng.uniform(-bound, bound, (c, d))
    theta_w = rng.uniform(-bound, bound, (c, d))
    phi_b = rng.uniform(-bound, bound, c) if bias else np.zeros(c)
    theta_b = rng.uniform(-bound, bound, c) if bias else np.zeros(c)
    return ModelParams(phi_w, phi_b, theta_w, theta_b, np.eye(d), np.eye(d))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _as_array(emb) -> np.ndarray:
    if isinstance(emb, EmbeddingMatrix):
        emb = emb.data
    return np.asarray(emb, dtype=np.float64)


def head_forward(weight: np.ndarray, bias: np.ndarray, emb) -> np.ndarray:
    """Row-wise softmax of ``emb @ weight.T + bias``."""
    x = _as_array(emb)
    if x.shape[-1] != weight.shape[1]:
        raise DataError(f"embedding dim {x.shape[-1]} != head input dim {weight.shape[1]}")
    logits = x @ weight.T + bias
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in cluster head")
    return softmax(logits, axis=-1)


def image_assign(params: ModelParams, emb) -> np.ndarray:
    return head_forward(params.phi_w, params.phi_b, emb)


def text_assign(params: ModelParams, emb) -> np.ndarray:
    return head_forward(params.theta_w, params.theta_b, emb)


def attention_weights(u: np.ndarray, neighbor_txt: np.ndarray, w_img: np.ndarray,
                      w_txt: np.ndarray) -> np.ndarray:
    """Softmax over neighbors of ``(W_img u)^T (W_txt v_j)``; works on one image or a batch.

    ``u`` is (d,) or (b, d); ``neighbor_txt`` is (k, d) or (b, k, d).
    """
    x = np.asarray(u, dtype=np.float64) @ w_img.T
    y = np.asarray(neighbor_txt, dtype=np.float64) @ w_txt.T
    scores = np.einsum("...d,...kd->...k", x, y)
    return softmax(scores, axis=-1)


def attention_combine(u, neighbor_txt_embs, neighbor_txt_assigns, w_img, w_txt) -> np.ndarray:
    """Attention-weighted average of the neighbor texts' cluster assignments."""
    neighbor_txt_embs = np.asarray(neighbor_txt_embs, dtype=np.float64)
    if neighbor_txt_embs.shape[-2] < 1:
        raise DataError("attention needs at least one neighboring text")
    a = attention_weights(u, neighbor_txt_embs, w_img, w_txt)
    return np.einsum("...k,...kc->...c", a, np.asarray(neighbor_txt_assigns, dtype=np.float64))


def pseudo_label(p_prime: np.ndarray) -> np.ndarray:
    """One-hot at the argmax (lowest index wins ties); accepts (c,) or (n, c)."""
    p_prime = np.asarray(p_prime)
    out = np.zeros(p_prime.shape)
    idx = np.argmax(p_prime, axis=-1)
    np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
    return out


def image_prototypes(q: np.ndarray, u) -> np.ndarray:
    """Assignment-weighted mean image embedding for each cluster."""
    q = np.asarray(q, dtype=np.float64)
    mass = q.sum(0)
    dead = np.flatnonzero(mass <= 0)
    if dead.size:
        raise NumericError(f"cluster {int(dead[0])} has zero assignment mass")
    return (q.T @ _as_array(u)) / mass[:, None]


def nearest_word_neighborhoods(h_img: np.ndarray, words: np.ndarray, k_p: int) -> np.ndarray:
    """For each prototype: its nearest word, then that word's ``k_p`` nearest words (itself included)."""
    h_img = np.asarray(h_img, dtype=np.float64)
    words = np.asarray(words, dtype=np.float64)
    if words.shape[0] == 0:
        raise DataError("semantic space is empty")
    if not 1 <= k_p <= words.shape[0]:
        raise DataError(f"k_p={k_p} outside [1, {words.shape[0]}]")
    nearest = np.argmax(h_img @ words.T, axis=1)
    sims = words[nearest] @ words.T
    sims[np.arange(len(nearest)), nearest] = np.inf
    return np.argsort(-sims, axis=1, kind="stable")[:, :k_p]


def text_prototypes(h_img: np.ndarray, space, k_p: int) -> np.ndarray:
    """Unit-normalized mean of the ``k_p`` words around each prototype's nearest word."""
    words = space
    if hasattr(space, "kept_embeddings"):
        words = space.kept_embeddings
    words = _as_array(words)
    nbrs = nearest_word_neighborhoods(h_img, words, k_p)
    h = words[nbrs].mean(axis=1)
    return h / np.linalg.norm(h, axis=1, keepdims=True)


@dataclass(frozen=True)
class PrototypePair:
    """Matched image (q-weighted mean) and text prototypes, one row per cluster."""

    image: np.ndarray
    text: np.ndarray


def build_prototypes(q: np.ndarray, u, space, k_p: int) -> PrototypePair:
    h_img = image_prototypes(q, u)
    return PrototypePair(h_img, text_prototypes(h_img, space, k_p))


def save_checkpoint(path, params: ModelParams) -> None:
    """``MCAP`` | u32 version | u32 c | u32 d | phi (w, b) | theta (w, b) | W_img | W_txt as f32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", CKPT_MAGIC, CKPT_VERSION, params.c, params.d))
        for arr in (params.phi_w, params.phi_b, params.theta_w, params.theta_b,
                    params.w_img, params.w_txt):
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < 16:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, c, d = struct.unpack_from("<4sIII", raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise DataError(f"{path}: not an MCAP v{CKPT_VERSION} checkpoint")
    sizes = [c * d, c, c * d, c, d * d, d * d]
    if len(raw) != 16 + 4 * sum(sizes):
        raise DataError(f"{path}: checkpoint size does not match c={c}, d={d}")
    flat = np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return ModelParams(parts[0].reshape(c, d), parts[1], parts[2].reshape(c, d), parts[3],
                       parts[4].reshape(d, d), parts[5].reshape(d, d))
