"""Linear span encoders with exact analytic gradients.

Passage side: every token i gets a start/end-agnostic vector

    h_i = C @ e_i + N @ mean(e_j : j in window(i), j != i)

where e are rows of the passage embedding table, C mixes the token's own
embedding and N mixes the mean of the surrounding window (zero vector when
the window is empty).  Question side: the question token embeddings are
mean-pooled into a single vector b, and two affine heads produce the start
and end query vectors q_start = Ws @ b + bs, q_end = We @ b + be.

Gradients are hand-derived and accumulated into plain dict buffers keyed by
parameter name; the checkpoint format is a little-endian binary file with a
fixed matrix order (magic "DPPM").
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Paragraph

CHECKPOINT_MAGIC = b"DPPM"
CHECKPOINT_VERSION = 1

# Serialization order of the parameter arrays inside a checkpoint.
_PARAM_ORDER = (
    "embeddings",
    "context_matrix",
    "neighbor_matrix",
    "q_embeddings",
    "start_head",
    "start_bias",
    "end_head",
    "end_bias",
)


class CheckpointError(ValueError):
    """Unreadable or malformed encoder checkpoint."""


@dataclass
class QuestionEmbedding:
    q_start: np.ndarray
    q_end: np.ndarray


@dataclass
class EncoderParams:
    embeddings: np.ndarray        # (V, d) passage token table
    context_matrix: np.ndarray    # (d, d) applied to the token's own embedding
    neighbor_matrix: np.ndarray   # (d, d) applied to the window mean
    q_embeddings: np.ndarray      # (V, d) question token table
    start_head: np.ndarray        # (d, d)
    start_bias: np.ndarray        # (d,)
    end_head: np.ndarray          # (d, d)
    end_bias: np.ndarray          # (d,)
    window: int = 2

    def __post_init__(self) -> None:
        if self.window < 0:
            raise ValueError("window must be >= 0")
        v, d = self.embeddings.shape
        if self.q_embeddings.shape != (v, d):
            raise ValueError("question embedding table shape mismatch")
        for name in ("context_matrix", "neighbor_matrix", "start_head", "end_head"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be ({d}, {d})")
        for name in ("start_bias", "end_bias"):
            if getattr(self, name).shape != (d,):
                raise ValueError(f"{name} must be ({d},)")

    @property
    def vocab_size(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def arrays(self) -> dict[str, np.ndarray]:
        """Parameter arrays keyed by name, in checkpoint order."""
        return {name: getattr(self, name) for name in _PARAM_ORDER}

    def question_array_names(self) -> tuple[str, ...]:
        """Names of the parameters owned by the question encoder."""
        return ("q_embeddings", "start_head", "start_bias", "end_head", "end_bias")

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            **{name: getattr(self, name).copy() for name in _PARAM_ORDER},
            window=self.window,
        )


def init_params(vocab_size: int, dim: int, window: int = 2, seed: int = 0) -> EncoderParams:
    """Random initialization: unit-variance embeddings, 1/sqrt(d) mixing matrices."""
    if vocab_size < 1 or dim < 1:
        raise ValueError("vocab_size and dim must be positive")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)
    return EncoderParams(
        embeddings=rng.standard_normal((vocab_size, dim)),
        context_matrix=rng.standard_normal((dim, dim)) * scale,
        neighbor_matrix=rng.standard_normal((dim, dim)) * scale,
        q_embeddings=rng.standard_normal((vocab_size, dim)),
        start_head=rng.standard_normal((dim, dim)) * scale,
        start_bias=np.zeros(dim),
        end_head=rng.standard_normal((dim, dim)) * scale,
        end_bias=np.zeros(dim),
        window=window,
    )


def zero_gradients(params: EncoderParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.arrays().items()}


def _neighbor_stats(rows: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding-window sums excluding the center row, plus neighbor counts."""
    m = rows.shape[0]
    counts = np.zeros(m, dtype=np.int64)
    if window <= 0 or m <= 1:
        return np.zeros_like(rows), counts
    prefix = np.cumsum(rows, axis=0)
    idx = np.arange(m)
    hi = np.minimum(idx + window, m - 1)
    lo = np.maximum(idx - window, 0)
    sums = prefix[hi].copy()
    has_left = lo > 0
    sums[has_left] -= prefix[lo[has_left] - 1]
    sums -= rows
    counts = hi - lo  # window size minus the excluded center
    return sums, counts


def _check_ids(params: EncoderParams, ids: np.ndarray) -> None:
    if ids.size == 0:
        raise ValueError("paragraph has no tokens")
    bad = np.where((ids < 0) | (ids >= params.vocab_size))[0]
    if bad.size:
        pos = int(bad[0])
        raise ValueError(f"unknown token id {int(ids[pos])} at position {pos}")


def _window_means(params: EncoderParams, ids: np.ndarray) -> np.ndarray:
    rows = params.embeddings[ids]
    sums, counts = _neighbor_stats(rows, params.window)
    means = np.zeros_like(rows)
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz, None]
    return means


def encode_passage(params: EncoderParams, paragraph: Paragraph | np.ndarray) -> np.ndarray:
    """Token matrix H of shape (m, d); row i is the vector for token i."""
    ids = paragraph.token_ids if isinstance(paragraph, Paragraph) else np.asarray(paragraph)
    _check_ids(params, ids)
    rows = params.embeddings[ids]
    means = _window_means(params, ids)
    return rows @ params.context_matrix.T + means @ params.neighbor_matrix.T


def encode_question(params: EncoderParams, token_ids) -> QuestionEmbedding:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("question has no tokens")
    _check_ids(params, ids)
    pooled = params.q_embeddings[ids].mean(axis=0)
    return QuestionEmbedding(
        q_start=params.start_head @ pooled + params.start_bias,
        q_end=params.end_head @ pooled + params.end_bias,
    )


def phrase_representation(h: np.ndarray, start: int, end: int) -> np.ndarray:
    """Concatenated [h_start; h_end] vector for the inclusive span."""
    m = h.shape[0]
    if not 0 <= start <= end < m:
        raise ValueError(f"span ({start}, {end}) out of range for {m} tokens")
    return np.concatenate([h[start], h[end]])


def accumulate_passage_gradients(
    params: EncoderParams,
    paragraph: Paragraph | np.ndarray,
    d_h: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Backpropagate an upstream (m, d) gradient on H into the buffers."""
    ids = paragraph.token_ids if isinstance(paragraph, Paragraph) else np.asarray(paragraph)
    _check_ids(params, ids)
    d_h = np.asarray(d_h)
    if d_h.shape != (ids.size, params.dim):
        raise ValueError(f"upstream gradient must be ({ids.size}, {params.dim}), got {d_h.shape}")
    rows = params.embeddings[ids]
    means = _window_means(params, ids)
    grads["context_matrix"] += d_h.T @ rows
    grads["neighbor_matrix"] += d_h.T @ means

    d_rows = d_h @ params.context_matrix
    d_means = d_h @ params.neighbor_matrix
    _, counts = _neighbor_stats(rows, params.window)
    scaled = np.zeros_like(d_means)
    nz = counts > 0
    scaled[nz] = d_means[nz] / counts[nz, None]
    # The window relation is symmetric: j is a neighbor of i iff i is one of j.
    spread, _ = _neighbor_stats(scaled, params.window)
    np.add.at(grads["embeddings"], ids, d_rows + spread)


def accumulate_question_gradients(
    params: EncoderParams,
    token_ids,
    d_q_start: np.ndarray,
    d_q_end: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Backpropagate upstream gradients on (q_start, q_end) into the buffers."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("question has no tokens")
    _check_ids(params, ids)
    d_q_start = np.asarray(d_q_start)
    d_q_end = np.asarray(d_q_end)
    if d_q_start.shape != (params.dim,) or d_q_end.shape != (params.dim,):
        raise ValueError("question gradients must be 1-d of size dim")
    pooled = params.q_embeddings[ids].mean(axis=0)
    grads["start_head"] += np.outer(d_q_start, pooled)
    grads["start_bias"] += d_q_start
    grads["end_head"] += np.outer(d_q_end, pooled)
    grads["end_bias"] += d_q_end
    d_pooled = params.start_head.T @ d_q_start + params.end_head.T @ d_q_end
    np.add.at(grads["q_embeddings"], ids, np.broadcast_to(d_pooled / ids.size, (ids.size, params.dim)))


def save_params(params: EncoderParams, path: str | Path) -> None:
    """Write a checkpoint: header then the parameter arrays as float32."""
    header = struct.pack(
        "<4sIIII",
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        params.vocab_size,
        params.dim,
        params.window,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name in _PARAM_ORDER:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes())


def load_params(path: str | Path) -> EncoderParams:
    blob = Path(path).read_bytes()
    head_size = struct.calcsize("<4sIIII")
    if len(blob) < head_size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, vocab_size, dim, window = struct.unpack_from("<4sIIII", blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    shapes = {
        "embeddings": (vocab_size, dim),
        "context_matrix": (dim, dim),
        "neighbor_matrix": (dim, dim),
        "q_embeddings": (vocab_size, dim),
        "start_head": (dim, dim),
        "start_bias": (dim,),
        "end_head": (dim, dim),
        "end_bias": (dim,),
    }
    offset = head_size
    arrays = {}
    for name in _PARAM_ORDER:
        shape = shapes[name]
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {name}")
        arrays[name] = (
            np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return EncoderParams(**arrays, window=window)
