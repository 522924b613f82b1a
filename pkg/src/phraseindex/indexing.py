"""Phrase dump construction, filtering, quantization, IVF, persistence.

A phrase dump stacks every paragraph's token vectors into one big matrix;
row r belongs to exactly one paragraph and rows of a paragraph are
contiguous and ordered by token position.  On top of the dump sit three
independent compressions:

* a linear filter scoring how likely a token is to start or end an answer,
  with a threshold picked against a dev set;
* int8 scalar quantization with one scale per row (scale = max|x| / 127,
  or 1.0 for an all-zero row);
* an inverted-file (IVF) coarse index from seeded k-means with Euclidean
  assignment.

On-disk layout (little-endian, magic "DPHI"), in file order:

    header   4s magic | u32 version | u32 d | u64 N | u8 quant | u32 n_clusters
             (padded with zeros to 64 bytes)
    offsets  N records of 40 bytes:
             u32 doc_ordinal | u32 paragraph | u32 token_pos
             | u32 char_start | u32 char_end | u32 cluster | 16 pad bytes
    scales   N float32
    payload  (aligned to a 64-byte file offset)
             N*d int8 codes (quant = 1) or N*d float32 (quant = 0)
    centroids n_clusters*d float32
    doc table u32 count, then per doc: u32 byte length + UTF-8 bytes

Paragraph texts are not part of the file; callers re-attach them from the
corpus to recover result strings after loading.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, QAPair, normalize_answer
from .encoder import EncoderParams, QuestionEmbedding, encode_passage, encode_question
from .training import AdamState, adam_step, init_adam

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"DPHI"
INDEX_VERSION = 1
_HEADER_FMT = "<4sIIQBI"
_HEADER_BLOCK = 64
_OFFSET_FMT = "<IIIIII16x"
_OFFSET_SIZE = struct.calcsize(_OFFSET_FMT)  # 40
QUANT_MODES = {"none": 0, "sq8": 1}
_QUANT_NAMES = {v: k for k, v in QUANT_MODES.items()}


class IndexFormatError(ValueError):
    """Unreadable or malformed index file."""


@dataclass
class PhraseDump:
    """Stacked token vectors plus the bookkeeping to map rows back to text."""

    dim: int
    quant_mode: str
    vectors: np.ndarray | None            # float32 (N, d) when quant_mode == "none"
    codes: np.ndarray | None              # int8 (N, d) when quant_mode == "sq8"
    scales: np.ndarray                    # float32 (N,)
    doc_ids: list[str]
    doc_ord: np.ndarray                   # u32 (N,)
    par_idx: np.ndarray                   # u32 (N,)
    token_pos: np.ndarray                 # u32 (N,)
    char_start: np.ndarray                # u32 (N,)
    char_end: np.ndarray                  # u32 (N,)
    float_vectors: np.ndarray | None = None  # original float32 rows, kept for fine-tuning
    filter_logits: np.ndarray | None = None
    texts: dict[tuple[int, int], str] | None = None  # (doc_ord, par_idx) -> paragraph text

    def __post_init__(self) -> None:
        if self.quant_mode not in QUANT_MODES:
            raise ValueError(f"unknown quantization mode {self.quant_mode!r}")
        n = self.n_rows
        for name in ("doc_ord", "par_idx", "token_pos", "char_start", "char_end", "scales"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} length mismatch")
        self._rebuild_paragraph_table()
        self._dequantized: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        storage = self.vectors if self.quant_mode == "none" else self.codes
        return 0 if storage is None else int(storage.shape[0])

    def _rebuild_paragraph_table(self) -> None:
        """Row ranges per paragraph; rows must arrive grouped and ordered."""
        n = self.n_rows
        keys = np.stack([self.doc_ord, self.par_idx], axis=1) if n else np.zeros((0, 2), dtype=np.uint32)
        change = np.ones(n, dtype=bool)
        if n > 1:
            change[1:] = np.any(keys[1:] != keys[:-1], axis=1)
        starts = np.flatnonzero(change)
        ends = np.append(starts[1:], n)
        self.par_row_start = starts.astype(np.int64)
        self.par_row_end = ends.astype(np.int64)
        self.par_keys = [(int(self.doc_ord[s]), int(self.par_idx[s])) for s in starts]
        if len(set(self.par_keys)) != len(self.par_keys):
            raise ValueError("paragraph rows are not contiguous")
        self.row_par = np.zeros(n, dtype=np.int64)
        for ordinal, (s, e) in enumerate(zip(self.par_row_start, self.par_row_end)):
            self.row_par[s:e] = ordinal
            pos = self.token_pos[s:e]
            if np.any(np.diff(pos.astype(np.int64)) <= 0):
                raise ValueError("token positions out of order inside a paragraph")

    @property
    def n_paragraphs(self) -> int:
        return len(self.par_keys)

    def matrix(self) -> np.ndarray:
        """Float32 view used for scoring (dequantized once and cached)."""
        if self.quant_mode == "none":
            return self.vectors
        if self._dequantized is None:
            self._dequantized = dequantize_sq8(self.codes, self.scales)
        return self._dequantized

    def rows(self, ids) -> np.ndarray:
        return self.matrix()[np.asarray(ids, dtype=np.int64)]

    def float_rows(self, ids) -> np.ndarray:
        """Original (pre-quantization) float32 rows; errors when unavailable."""
        ids = np.asarray(ids, dtype=np.int64)
        if self.quant_mode == "none":
            return self.vectors[ids]
        if self.float_vectors is None:
            raise ValueError(
                "quantized dump has no float32 sidecar; rebuild the dump keeping "
                "float vectors (keep_float=True) or use an unquantized index"
            )
        return self.float_vectors[ids]

    def attach_texts(self, corpus: Corpus) -> None:
        """Re-bind paragraph texts (dropped by save/load) from the corpus."""
        texts: dict[tuple[int, int], str] = {}
        for ordinal, (doc_ord, par_idx) in enumerate(self.par_keys):
            par = corpus.paragraph(self.doc_ids[doc_ord], par_idx)
            last_row = int(self.par_row_end[ordinal]) - 1
            if int(self.char_end[last_row]) > len(par.text):
                raise ValueError(
                    f"corpus does not match this dump: char span exceeds paragraph "
                    f"({self.doc_ids[doc_ord]!r}, paragraph {par_idx})"
                )
            texts[(doc_ord, par_idx)] = par.text
        self.texts = texts

    def paragraph_text(self, row: int) -> str | None:
        if self.texts is None:
            return None
        return self.texts.get((int(self.doc_ord[row]), int(self.par_idx[row])))

    def span_text(self, start_row: int, end_row: int) -> str:
        text = self.paragraph_text(start_row)
        if text is None:
            return ""
        return text[int(self.char_start[start_row]) : int(self.char_end[end_row])]


def build_phrase_dump(params: EncoderParams, corpus: Corpus) -> PhraseDump:
    """Encode every paragraph and stack the token vectors in corpus order."""
    doc_ids = [doc.doc_id for doc in corpus.documents]
    blocks, doc_o, par_i, tok_p, c_s, c_e = [], [], [], [], [], []
    texts: dict[tuple[int, int], str] = {}
    for ord_, doc in enumerate(corpus.documents):
        for p_idx, par in enumerate(doc.paragraphs):
            h = encode_passage(params, par).astype(np.float32)
            blocks.append(h)
            m = len(par)
            doc_o.append(np.full(m, ord_, dtype=np.uint32))
            par_i.append(np.full(m, p_idx, dtype=np.uint32))
            tok_p.append(np.arange(m, dtype=np.uint32))
            c_s.append(par.char_starts.astype(np.uint32))
            c_e.append(par.char_ends.astype(np.uint32))
            texts[(ord_, p_idx)] = par.text
    if not blocks:
        raise ValueError("corpus has no paragraphs")
    vectors = np.concatenate(blocks, axis=0)
    return PhraseDump(
        dim=params.dim,
        quant_mode="none",
        vectors=vectors,
        codes=None,
        scales=np.ones(vectors.shape[0], dtype=np.float32),
        doc_ids=doc_ids,
        doc_ord=np.concatenate(doc_o),
        par_idx=np.concatenate(par_i),
        token_pos=np.concatenate(tok_p),
        char_start=np.concatenate(c_s),
        char_end=np.concatenate(c_e),
        texts=texts,
    )


# ---------------------------------------------------------------------------
# Scalar quantization


def quantize_sq8(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row int8 codes and float32 scales; all-zero rows get scale 1.0."""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise ValueError("expected a (N, d) matrix")
    peak = np.abs(vectors).max(axis=1)
    scales = np.where(peak > 0, peak / 127.0, 1.0).astype(np.float32)
    codes = np.rint(vectors / scales[:, None].astype(np.float64))
    codes = np.clip(codes, -127, 127).astype(np.int8)
    return codes, scales


def dequantize_sq8(codes: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return codes.astype(np.float32) * scales[:, None].astype(np.float32)


def quantize_dump(dump: PhraseDump, keep_float: bool = True) -> PhraseDump:
    """SQ8-compress a float dump; optionally retain the float32 sidecar."""
    if dump.quant_mode != "none":
        raise ValueError("dump is already quantized")
    codes, scales = quantize_sq8(dump.vectors)
    return PhraseDump(
        dim=dump.dim,
        quant_mode="sq8",
        vectors=None,
        codes=codes,
        scales=scales,
        doc_ids=list(dump.doc_ids),
        doc_ord=dump.doc_ord,
        par_idx=dump.par_idx,
        token_pos=dump.token_pos,
        char_start=dump.char_start,
        char_end=dump.char_end,
        float_vectors=dump.vectors.copy() if keep_float else None,
        filter_logits=None if dump.filter_logits is None else dump.filter_logits.copy(),
        texts=None if dump.texts is None else dict(dump.texts),
    )


# ---------------------------------------------------------------------------
# Filter layer


@dataclass
class FilterParams:
    weight: np.ndarray
    bias: float
    threshold: float = float("-inf")

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.weight)) or not np.isfinite(self.bias):
            raise ValueError("filter weight and bias must be finite")

    def logits(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.weight + self.bias


def answer_boundary_mask(dump: PhraseDump, qa_pairs: Sequence[QAPair]) -> np.ndarray:
    """Boolean mask of rows that are a gold start or gold end token."""
    by_id = {doc_id: i for i, doc_id in enumerate(dump.doc_ids)}
    lookup: dict[tuple[int, int, int], int] = {}
    for row in range(dump.n_rows):
        lookup[(int(dump.doc_ord[row]), int(dump.par_idx[row]), int(dump.token_pos[row]))] = row
    mask = np.zeros(dump.n_rows, dtype=bool)
    for qa in qa_pairs:
        span = qa.gold_span
        if span is None or span.doc_id not in by_id:
            continue
        for pos in (span.start, span.end):
            row = lookup.get((by_id[span.doc_id], span.paragraph, pos))
            if row is not None:
                mask[row] = True
    return mask


def train_filter(
    vectors: np.ndarray,
    positive_mask: np.ndarray,
    *,
    lr: float = 0.05,
    iterations: int = 300,
    seed: int = 0,
) -> FilterParams:
    """Logistic regression on token vectors by binary cross-entropy (Adam)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(positive_mask, dtype=np.float64)
    if vectors.shape[0] != labels.shape[0]:
        raise ValueError("vectors and mask length mismatch")
    if labels.sum() == 0:
        raise ValueError("no positive rows to fit the filter on")
    rng = np.random.default_rng(seed)
    arrays = {"weight": rng.standard_normal(vectors.shape[1]) * 0.01, "bias": np.zeros(1)}
    adam = init_adam(arrays, lr=lr, clip_norm=None)
    n = vectors.shape[0]
    for _ in range(iterations):
        z = vectors @ arrays["weight"] + arrays["bias"][0]
        p = 1.0 / (1.0 + np.exp(-z))
        dz = (p - labels) / n
        grads = {"weight": vectors.T @ dz, "bias": np.array([dz.sum()])}
        adam_step(arrays, grads, adam)
    return FilterParams(weight=arrays["weight"], bias=float(arrays["bias"][0]))


def bce_loss_and_grads(
    weight: np.ndarray,
    bias: float,
    vectors: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, np.ndarray, float]:
    """Mean BCE of the filter on (vectors, labels) plus analytic gradients."""
    z = vectors @ weight + bias
    # log(1 + exp(z)) computed stably on both branches
    softplus = np.where(z > 0, z + np.log1p(np.exp(-z)), np.log1p(np.exp(z)))
    loss = float((softplus - labels * z).mean())
    p = 1.0 / (1.0 + np.exp(-z))
    dz = (p - labels) / labels.shape[0]
    return loss, vectors.T @ dz, float(dz.sum())


def _question_vectors(params: EncoderParams, vocab: Mapping[str, int], question: str) -> QuestionEmbedding:
    from .corpus import tokenize

    ids = [vocab[tok] for tok, _, _ in tokenize(question) if tok in vocab]
    if not ids:
        raise ValueError(f"question has no in-vocabulary tokens: {question!r}")
    return encode_question(params, ids)


def _all_span_candidates(dump: PhraseDump, q: QuestionEmbedding, max_span_len: int):
    """Every admissible span's (score, start_row, end_row), unsorted."""
    mat = dump.matrix()
    s_scores = mat @ q.q_start.astype(np.float64)
    e_scores = mat @ q.q_end.astype(np.float64)
    out_score, out_start, out_end = [], [], []
    for s, e in zip(dump.par_row_start, dump.par_row_end):
        pos = dump.token_pos[s:e].astype(np.int64)
        for local_i in range(e - s):
            j_hi = np.searchsorted(pos, pos[local_i] + max_span_len, side="left")
            ends = np.arange(local_i, j_hi)
            if ends.size == 0:
                continue
            out_score.append(s_scores[s + local_i] + e_scores[s + ends])
            out_start.append(np.full(ends.size, s + local_i, dtype=np.int64))
            out_end.append(s + ends)
    if not out_score:
        return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(out_score), np.concatenate(out_start), np.concatenate(out_end)


def select_filter_threshold(
    dump: PhraseDump,
    filter_params: FilterParams,
    dev_qa: Sequence[QAPair],
    encoder_params: EncoderParams,
    vocab: Mapping[str, int],
    max_accuracy_drop: float = 0.01,
    max_span_len: int = 20,
) -> float:
    """Largest threshold whose filtered top-1 accuracy stays within budget.

    For every dev question the exhaustive span ranking is computed once;
    sweeping the candidate thresholds (the sorted unique logits) then only
    moves a per-question pointer forward, which keeps the exact sweep cheap.
    Returns -inf when even the smallest cut overshoots the budget.
    """
    if not 0.0 <= max_accuracy_drop <= 1.0:
        raise ValueError("max_accuracy_drop must be in [0, 1]")
    if dump.texts is None:
        raise ValueError("dump has no paragraph texts attached")
    logits = filter_params.logits(dump.matrix())
    candidates = np.unique(logits)  # ascending
    n_q = 0
    hits = np.zeros(candidates.size + 1)  # slot 0 is the unfiltered baseline
    for qa in dev_qa:
        try:
            q = _question_vectors(encoder_params, vocab, qa.question)
        except ValueError:
            continue
        n_q += 1
        scores, starts, ends = _all_span_candidates(dump, q, max_span_len)
        if scores.size == 0:
            continue
        order = np.lexsort((ends, starts, -scores))
        min_logit = np.minimum(logits[starts[order]], logits[ends[order]])
        gold = normalize_answer(qa.answer)
        em = np.array(
            [normalize_answer(dump.span_text(int(starts[o]), int(ends[o]))) == gold for o in order],
            dtype=np.float64,
        )
        ptr = 0
        hits[0] += em[0]
        for t_i, t in enumerate(candidates, start=1):
            while ptr < min_logit.size and min_logit[ptr] < t:
                ptr += 1
            if ptr < min_logit.size:
                hits[t_i] += em[ptr]
    if n_q == 0:
        raise ValueError("no usable dev questions")
    accuracy = hits / n_q
    floor = accuracy[0] - max_accuracy_drop
    best = float("-inf")
    for t_i in range(candidates.size, 0, -1):
        if accuracy[t_i] >= floor - 1e-12:
            best = float(candidates[t_i - 1])
            break
    logger.info(
        "filter threshold %.6g: baseline %.4f, filtered %.4f over %d dev questions",
        best, accuracy[0], accuracy[np.searchsorted(candidates, best) + 1] if np.isfinite(best) else accuracy[0], n_q,
    )
    return best


def apply_filter(
    dump: PhraseDump,
    filter_params: FilterParams,
    threshold: float | None = None,
) -> tuple[PhraseDump, np.ndarray]:
    """Drop rows with filter logit below the threshold.

    Returns the filtered dump and a remap array: old row -> new row or -1.
    """
    t = filter_params.threshold if threshold is None else threshold
    logits = filter_params.logits(dump.matrix())
    keep = logits >= t
    if not keep.any():
        raise ValueError("threshold filters out every row")
    remap = np.full(dump.n_rows, -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    filtered = PhraseDump(
        dim=dump.dim,
        quant_mode=dump.quant_mode,
        vectors=None if dump.vectors is None else dump.vectors[keep],
        codes=None if dump.codes is None else dump.codes[keep],
        scales=dump.scales[keep],
        doc_ids=list(dump.doc_ids),
        doc_ord=dump.doc_ord[keep],
        par_idx=dump.par_idx[keep],
        token_pos=dump.token_pos[keep],
        char_start=dump.char_start[keep],
        char_end=dump.char_end[keep],
        float_vectors=None if dump.float_vectors is None else dump.float_vectors[keep],
        filter_logits=logits[keep],
        texts=None if dump.texts is None else dict(dump.texts),
    )
    return filtered, remap


# ---------------------------------------------------------------------------
# IVF


@dataclass
class IvfIndex:
    centroids: np.ndarray          # float32 (n_clusters, d)
    assignments: np.ndarray        # u32 (N,)
    lists: list[np.ndarray]        # row ids per cluster
    default_n_probe: int = 0       # 0 means probe everything

    @property
    def n_clusters(self) -> int:
        return int(self.centroids.shape[0])


def _lists_from_assignments(assignments: np.ndarray, n_clusters: int) -> list[np.ndarray]:
    order = np.argsort(assignments, kind="stable")
    sorted_assign = assignments[order]
    bounds = np.searchsorted(sorted_assign, np.arange(n_clusters + 1))
    return [order[bounds[c] : bounds[c + 1]].astype(np.int64) for c in range(n_clusters)]


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]), dtype=np.float64)
    centroids[0] = data[rng.integers(n)]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[c] = data[rng.integers(n)]
            continue
        centroids[c] = data[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((data - centroids[c]) ** 2, axis=1))
    return centroids


def build_ivf(dump: PhraseDump, n_clusters: int, seed: int = 0, iterations: int = 25) -> IvfIndex:
    """Seeded k-means (k-means++ init, Lloyd updates, Euclidean assignment)."""
    n = dump.n_rows
    if not 1 <= n_clusters <= n:
        raise ValueError(f"n_clusters must be in [1, {n}], got {n_clusters}")
    data = dump.matrix().astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(data, n_clusters, rng)
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        d2 = (
            np.sum(data * data, axis=1)[:, None]
            - 2.0 * (data @ centroids.T)
            + np.sum(centroids * centroids, axis=1)[None, :]
        )
        assignments = np.argmin(d2, axis=1)
        for c in range(n_clusters):
            members = assignments == c
            if members.any():
                centroids[c] = data[members].mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its centroid
                farthest = int(np.argmax(np.min(d2, axis=1)))
                centroids[c] = data[farthest]
                assignments[farthest] = c
    return IvfIndex(
        centroids=centroids.astype(np.float32),
        assignments=assignments.astype(np.uint32),
        lists=_lists_from_assignments(assignments, n_clusters),
        default_n_probe=n_clusters,
    )


# ---------------------------------------------------------------------------
# Persistence


def _pad_to(fh, boundary: int) -> None:
    pos = fh.tell()
    if pos % boundary:
        fh.write(b"\x00" * (boundary - pos % boundary))


def save_index(dump: PhraseDump, ivf: IvfIndex | None, path: str | Path) -> None:
    """Write the dump (and optional IVF) in the documented binary layout."""
    n = dump.n_rows
    if ivf is not None and ivf.assignments.shape[0] != n:
        raise ValueError("IVF assignments do not match the dump")
    clusters = ivf.assignments if ivf is not None else np.zeros(n, dtype=np.uint32)
    n_clusters = ivf.n_clusters if ivf is not None else 0
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                _HEADER_FMT,
                INDEX_MAGIC,
                INDEX_VERSION,
                dump.dim,
                n,
                QUANT_MODES[dump.quant_mode],
                n_clusters,
            )
        )
        _pad_to(fh, _HEADER_BLOCK)
        records = np.zeros(n, dtype=np.dtype("<u4, <u4, <u4, <u4, <u4, <u4, V16"))
        records["f0"], records["f1"], records["f2"] = dump.doc_ord, dump.par_idx, dump.token_pos
        records["f3"], records["f4"], records["f5"] = dump.char_start, dump.char_end, clusters
        fh.write(records.tobytes())
        fh.write(np.ascontiguousarray(dump.scales, dtype="<f4").tobytes())
        _pad_to(fh, _HEADER_BLOCK)
        if dump.quant_mode == "none":
            fh.write(np.ascontiguousarray(dump.vectors, dtype="<f4").tobytes())
        else:
            fh.write(np.ascontiguousarray(dump.codes, dtype="i1").tobytes())
        if ivf is not None:
            fh.write(np.ascontiguousarray(ivf.centroids, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(dump.doc_ids)))
        for doc_id in dump.doc_ids:
            raw = doc_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_index(path: str | Path) -> tuple[PhraseDump, IvfIndex | None]:
    blob = Path(path).read_bytes()
    head_size = struct.calcsize(_HEADER_FMT)
    if len(blob) < head_size:
        raise IndexFormatError(f"{path}: truncated header")
    magic, version, dim, n, quant, n_clusters = struct.unpack_from(_HEADER_FMT, blob)
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic {magic!r}")
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported version {version}")
    if quant not in _QUANT_NAMES:
        raise IndexFormatError(f"{path}: unknown quantization mode byte {quant}")

    def take(nbytes: int, what: str, offset: int) -> tuple[bytes, int]:
        if offset + nbytes > len(blob):
            raise IndexFormatError(f"{path}: truncated while reading {what}")
        return blob[offset : offset + nbytes], offset + nbytes

    offset = _HEADER_BLOCK
    raw, offset = take(n * _OFFSET_SIZE, "offsets table", offset)
    records = np.frombuffer(raw, dtype=np.dtype("<u4, <u4, <u4, <u4, <u4, <u4, V16"))
    raw, offset = take(n * 4, "scales", offset)
    scales = np.frombuffer(raw, dtype="<f4").copy()
    if offset % _HEADER_BLOCK:
        offset += _HEADER_BLOCK - offset % _HEADER_BLOCK
    vectors = codes = None
    if quant == QUANT_MODES["none"]:
        raw, offset = take(n * dim * 4, "payload", offset)
        vectors = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
    else:
        raw, offset = take(n * dim, "payload", offset)
        codes = np.frombuffer(raw, dtype="i1").reshape(n, dim).copy()
    centroids = None
    if n_clusters:
        raw, offset = take(n_clusters * dim * 4, "centroids", offset)
        centroids = np.frombuffer(raw, dtype="<f4").reshape(n_clusters, dim).copy()
    raw, offset = take(4, "doc table", offset)
    (n_docs,) = struct.unpack("<I", raw)
    doc_ids = []
    for _ in range(n_docs):
        raw, offset = take(4, "doc table entry", offset)
        (length,) = struct.unpack("<I", raw)
        raw, offset = take(length, "doc id", offset)
        doc_ids.append(raw.decode("utf-8"))
    if offset != len(blob):
        raise IndexFormatError(f"{path}: {len(blob) - offset} trailing bytes")

    dump = PhraseDump(
        dim=dim,
        quant_mode=_QUANT_NAMES[quant],
        vectors=vectors,
        codes=codes,
        scales=scales,
        doc_ids=doc_ids,
        doc_ord=records["f0"].copy(),
        par_idx=records["f1"].copy(),
        token_pos=records["f2"].copy(),
        char_start=records["f3"].copy(),
        char_end=records["f4"].copy(),
    )
    ivf = None
    if n_clusters:
        assignments = records["f5"].copy()
        ivf = IvfIndex(
            centroids=centroids,
            assignments=assignments,
            lists=_lists_from_assignments(assignments.astype(np.int64), n_clusters),
            default_n_probe=n_clusters,
        )
    return dump, ivf
