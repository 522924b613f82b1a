"""Span search over a phrase dump.

The score of a span is the inner product of its start vector with q_start
plus that of its end vector with q_end, so retrieval decomposes into two
maximum-inner-product searches.  The searcher takes the top-k rows for each
side, completes every candidate with its admissible partners inside the
same paragraph (start <= end, span at most L tokens), merges both
directions, and sorts by score with deterministic tie-breaks (earlier
start row, then earlier end row).  Scores always use the dump's scoring
matrix (dequantized when compressed), so rankings survive a save/load
round trip bit for bit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .corpus import PhraseSpan, normalize_answer, tokenize
from .encoder import EncoderParams, QuestionEmbedding, encode_question
from .indexing import IvfIndex, PhraseDump

logger = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    k: int = 100              # MIPS seeds per side
    max_span_len: int = 20    # L, in tokens
    n_probe: int | None = None  # None: IVF default (or exact scan without IVF)
    n_results: int = 10       # results returned after dedup

    def __post_init__(self) -> None:
        if min(self.k, self.max_span_len, self.n_results) < 1:
            raise ValueError("k, max_span_len and n_results must be positive")
        if self.n_probe is not None and self.n_probe < 1:
            raise ValueError("n_probe must be positive")


@dataclass
class SearchResult:
    span: PhraseSpan
    score: float
    text: str
    start_row: int
    end_row: int
    char_start: int
    char_end: int

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "score": self.score,
            "doc_id": self.span.doc_id,
            "paragraph": self.span.paragraph,
            "start_token": self.span.start,
            "end_token": self.span.end,
            "char_start": self.char_start,
            "char_end": self.char_end,
        }


def _probe_rows(dump: PhraseDump, ivf: IvfIndex | None, query: np.ndarray, n_probe: int | None) -> np.ndarray | None:
    """Row ids to score, or None for a full scan."""
    if ivf is None:
        return None
    probes = ivf.default_n_probe if n_probe is None else n_probe
    if probes <= 0 or probes >= ivf.n_clusters:
        return None
    diffs = ivf.centroids.astype(np.float64) - query[None, :]
    d2 = np.sum(diffs * diffs, axis=1)
    order = np.lexsort((np.arange(ivf.n_clusters), d2))[:probes]
    picked = [ivf.lists[c] for c in order if ivf.lists[c].size]
    if not picked:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(picked)


def mips_topk(
    dump: PhraseDump,
    ivf: IvfIndex | None,
    query: np.ndarray,
    k: int,
    n_probe: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Top-k rows by inner product, ties broken toward lower row ids.

    With an IVF, only rows in the n_probe nearest clusters (by centroid
    Euclidean distance) are scored; n_probe >= n_clusters is an exact scan.
    """
    if k < 1:
        raise ValueError("k must be positive")
    query = np.asarray(query, dtype=np.float64)
    rows = _probe_rows(dump, ivf, query, n_probe)
    if rows is None:
        scores = dump.matrix() @ query
        ids = np.arange(dump.n_rows, dtype=np.int64)
    else:
        ids = rows
        scores = dump.rows(rows) @ query if rows.size else np.zeros(0)
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


def mips_topk_batch(
    dump: PhraseDump,
    ivf: IvfIndex | None,
    queries: np.ndarray,
    k: int,
    n_probe: int | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """One batched MIPS call: a (Q, d) query matrix in, per-query top-k out."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ValueError("queries must be a (Q, d) matrix")
    if ivf is None or (n_probe is not None and n_probe >= ivf.n_clusters) or (n_probe is None and ivf.default_n_probe >= ivf.n_clusters):
        # exact mode shares a single matrix product across all queries
        all_scores = dump.matrix() @ queries.T
        ids = np.arange(dump.n_rows, dtype=np.int64)
        out = []
        for col in range(queries.shape[0]):
            scores = all_scores[:, col]
            order = np.lexsort((ids, -scores))[:k]
            out.append((ids[order], scores[order]))
        return out
    return [mips_topk(dump, ivf, queries[col], k, n_probe) for col in range(queries.shape[0])]


def constrained_search(
    dump: PhraseDump,
    ivf: IvfIndex | None,
    q: QuestionEmbedding,
    config: SearchConfig,
) -> list[SearchResult]:
    """Seeded span search: MIPS on both sides, then partner completion.

    Returns every candidate span found, sorted by descending score with
    (start_row, end_row) tie-breaks; no deduplication or truncation.
    """
    q_start = np.asarray(q.q_start, dtype=np.float64)
    q_end = np.asarray(q.q_end, dtype=np.float64)
    (start_ids, _), (end_ids, _) = mips_topk_batch(
        dump, ivf, np.stack([q_start, q_end]), config.k, config.n_probe
    )
    pair_starts: list[np.ndarray] = []
    pair_ends: list[np.ndarray] = []

    for row in start_ids.tolist():
        par = int(dump.row_par[row])
        lo, hi = int(dump.par_row_start[par]), int(dump.par_row_end[par])
        pos = dump.token_pos[lo:hi].astype(np.int64)
        anchor = int(dump.token_pos[row])
        j_lo = np.searchsorted(pos, anchor, side="left")
        j_hi = np.searchsorted(pos, anchor + config.max_span_len, side="left")
        if j_hi <= j_lo:
            continue
        ends = np.arange(lo + j_lo, lo + j_hi)
        pair_starts.append(np.full(ends.size, row, dtype=np.int64))
        pair_ends.append(ends)

    for row in end_ids.tolist():
        par = int(dump.row_par[row])
        lo, hi = int(dump.par_row_start[par]), int(dump.par_row_end[par])
        pos = dump.token_pos[lo:hi].astype(np.int64)
        anchor = int(dump.token_pos[row])
        i_lo = np.searchsorted(pos, anchor - config.max_span_len + 1, side="left")
        i_hi = np.searchsorted(pos, anchor, side="right")
        if i_hi <= i_lo:
            continue
        starts = np.arange(lo + i_lo, lo + i_hi)
        pair_starts.append(starts)
        pair_ends.append(np.full(starts.size, row, dtype=np.int64))

    if not pair_starts:
        return []
    i_all = np.concatenate(pair_starts)
    j_all = np.concatenate(pair_ends)
    keys = np.unique(i_all * np.int64(dump.n_rows) + j_all)
    i_all, j_all = keys // dump.n_rows, keys % dump.n_rows

    # one dot product per visited row, so a row's contribution never depends
    # on which anchor reached it
    visited = np.unique(np.concatenate([i_all, j_all]))
    dots_start = dump.rows(visited) @ q_start
    dots_end = dump.rows(visited) @ q_end
    scores = dots_start[np.searchsorted(visited, i_all)] + dots_end[np.searchsorted(visited, j_all)]

    order = np.lexsort((j_all, i_all, -scores))
    results = []
    for idx in order:
        s_row, e_row, score = int(i_all[idx]), int(j_all[idx]), float(scores[idx])
        results.append(
            SearchResult(
                span=PhraseSpan(
                    doc_id=dump.doc_ids[int(dump.doc_ord[s_row])],
                    paragraph=int(dump.par_idx[s_row]),
                    start=int(dump.token_pos[s_row]),
                    end=int(dump.token_pos[e_row]),
                ),
                score=float(score),
                text=dump.span_text(s_row, e_row),
                start_row=s_row,
                end_row=e_row,
                char_start=int(dump.char_start[s_row]),
                char_end=int(dump.char_end[e_row]),
            )
        )
    return results


def dedup(results: Sequence[SearchResult]) -> list[SearchResult]:
    """Collapse results sharing (document, paragraph, normalized text).

    Input is expected sorted by descending score, so the survivor of each
    group is its best-scoring member; order is otherwise preserved.
    """
    seen: set[tuple[str, int, str]] = set()
    out = []
    for res in results:
        key = (res.span.doc_id, res.span.paragraph, normalize_answer(res.text))
        if key in seen:
            continue
        seen.add(key)
        out.append(res)
    return out


class PhraseSearcher:
    """Loaded dump + encoders + vocabulary, ready to answer questions."""

    def __init__(
        self,
        dump: PhraseDump,
        ivf: IvfIndex | None,
        params: EncoderParams,
        vocabulary: Mapping[str, int],
        config: SearchConfig | None = None,
    ):
        if dump.texts is None:
            raise ValueError("dump has no paragraph texts attached; call attach_texts first")
        if params.dim != dump.dim:
            raise ValueError(f"encoder dim {params.dim} != dump dim {dump.dim}")
        self.dump = dump
        self.ivf = ivf
        self.params = params
        self.vocabulary = vocabulary
        self.config = config or SearchConfig()

    def encode_query(self, question: str) -> QuestionEmbedding:
        if not question or not question.strip():
            raise ValueError("question is empty")
        ids = [self.vocabulary[tok] for tok, _, _ in tokenize(question) if tok in self.vocabulary]
        if not ids:
            raise ValueError(f"question has no in-vocabulary tokens: {question!r}")
        return encode_question(self.params, ids)

    def search(self, question: str, config: SearchConfig | None = None) -> list[SearchResult]:
        cfg = config or self.config
        q = self.encode_query(question)
        candidates = constrained_search(self.dump, self.ivf, q, cfg)
        return dedup(candidates)[: cfg.n_results]

    def batch_search(self, questions: Sequence[str], config: SearchConfig | None = None) -> list[list[SearchResult]]:
        """Per-question searches; a failing slot logs a warning and yields []."""
        out: list[list[SearchResult]] = []
        for slot, question in enumerate(questions):
            try:
                out.append(self.search(question, config))
            except ValueError as exc:
                logger.warning("batch slot %d failed: %s", slot, exc)
                out.append([])
        return out
