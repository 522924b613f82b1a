"""Query-side fine-tuning against a frozen phrase dump.

The dump is read-only: only the question encoder's parameters (question
embedding table, start/end heads and biases) receive updates.  For each
training question the current encoder retrieves the top-k phrases, and the
loss is the negative log of the marginal probability mass (softmax over the
k raw scores) on results whose text normalizes to the gold answer.
Questions whose top-k contains no match are skipped and contribute exactly
zero gradient.  Raw scores and gradients use the original float32 vectors
of the retrieved rows, so quantized dumps must retain their float sidecar.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .corpus import QAPair, normalize_answer, tokenize
from .encoder import EncoderParams, accumulate_question_gradients, encode_question
from .indexing import IvfIndex, PhraseDump
from .search import PhraseSearcher, SearchConfig, SearchResult
from .training import adam_step, init_adam, read_kv_file

logger = logging.getLogger(__name__)


@dataclass
class QsftConfig:
    top_k: int = 100
    batch_size: int = 12
    epochs: int = 10
    lr: float = 3e-5
    seed: int = 0
    clip_norm: float = 1.0
    max_span_len: int = 20
    n_probe: int | None = None

    def __post_init__(self) -> None:
        if min(self.top_k, self.batch_size) < 1 or self.epochs < 0:
            raise ValueError("top_k and batch_size must be >= 1, epochs >= 0")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            k=self.top_k,
            max_span_len=self.max_span_len,
            n_probe=self.n_probe,
            n_results=self.top_k,
        )


_QSFT_FIELDS = {
    "top_k": int,
    "batch_size": int,
    "epochs": int,
    "lr": float,
    "seed": int,
    "clip_norm": float,
    "max_span_len": int,
    "n_probe": int,
}


def load_qsft_config(path=None, overrides: Mapping[str, object] | None = None) -> QsftConfig:
    raw: dict[str, object] = {}
    if path is not None:
        for key, value in read_kv_file(path).items():
            if key not in _QSFT_FIELDS:
                raise ValueError(f"{path}: unknown config key {key!r}")
            raw[key] = _QSFT_FIELDS[key](value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _QSFT_FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        raw[key] = _QSFT_FIELDS[key](value)
    return QsftConfig(**raw)


def qsft_loss(
    scores: np.ndarray,
    match_mask: np.ndarray,
) -> tuple[float, np.ndarray] | None:
    """Negative log marginal mass of matching results under a softmax.

    ``scores`` are the raw span scores of the retrieved top-k and
    ``match_mask`` flags the ones whose text equals the gold answer after
    normalization.  Returns (loss, d_loss/d_scores), or None when nothing
    matches (the caller should skip the example).
    """
    scores = np.asarray(scores, dtype=np.float64)
    match_mask = np.asarray(match_mask, dtype=bool)
    if scores.shape != match_mask.shape or scores.ndim != 1:
        raise ValueError("scores and match_mask must be matching 1-d arrays")
    if scores.size == 0 or not match_mask.any():
        return None
    shifted = scores - scores.max()
    expd = np.exp(shifted)
    p_all = expd / expd.sum()
    loss = -(np.log(expd[match_mask].sum()) - np.log(expd.sum()))
    p_match = np.zeros_like(scores)
    p_match[match_mask] = expd[match_mask] / expd[match_mask].sum()
    return float(loss), p_all - p_match


def match_results(results: Sequence[SearchResult], answer: str) -> np.ndarray:
    gold = normalize_answer(answer)
    return np.array([normalize_answer(r.text) == gold for r in results], dtype=bool)


def _example_gradients(
    searcher: PhraseSearcher,
    qa: QAPair,
    cfg: SearchConfig,
) -> tuple[float, list[int], np.ndarray, np.ndarray] | None:
    """Loss plus d_loss/d(q_start, q_end) for one question, or None to skip."""
    question_ids = [
        searcher.vocabulary[tok] for tok, _, _ in tokenize(qa.question) if tok in searcher.vocabulary
    ]
    if not question_ids:
        return None
    q = encode_question(searcher.params, question_ids)
    results = searcher.search(qa.question, cfg)
    if not results:
        return None
    start_vecs = searcher.dump.float_rows([r.start_row for r in results]).astype(np.float64)
    end_vecs = searcher.dump.float_rows([r.end_row for r in results]).astype(np.float64)
    # raw scores recomputed from the original vectors the gradients flow through
    scores = start_vecs @ q.q_start + end_vecs @ q.q_end
    outcome = qsft_loss(scores, match_results(results, qa.answer))
    if outcome is None:
        return None
    loss, d_scores = outcome
    return loss, question_ids, d_scores @ start_vecs, d_scores @ end_vecs


def qsft_train(
    dump: PhraseDump,
    ivf: IvfIndex | None,
    params: EncoderParams,
    qa_pairs: Sequence[QAPair],
    config: QsftConfig,
    vocabulary: Mapping[str, int],
) -> EncoderParams:
    """Fine-tune the question encoder; returns new params, dump untouched.

    Retrieval runs with the current parameters on every step.  The returned
    parameters share no storage with the input, whose phrase-side arrays are
    carried over byte for byte.
    """
    if not qa_pairs:
        raise ValueError("no fine-tuning examples")
    tuned = params.copy()
    searcher = PhraseSearcher(dump, ivf, tuned, vocabulary)
    cfg = config.search_config()
    question_names = set(tuned.question_array_names())
    arrays = {name: arr for name, arr in tuned.arrays().items() if name in question_names}
    adam = init_adam(arrays, lr=config.lr, clip_norm=config.clip_norm)
    rng = np.random.default_rng(config.seed)

    for epoch in range(config.epochs):
        order = rng.permutation(len(qa_pairs))
        skipped = 0
        epoch_loss = 0.0
        used = 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [qa_pairs[i] for i in order[lo : lo + config.batch_size]]
            grads = {name: np.zeros_like(arr) for name, arr in arrays.items()}
            batch_used = 0
            for qa in chunk:
                outcome = _example_gradients(searcher, qa, cfg)
                if outcome is None:
                    skipped += 1
                    continue
                loss, question_ids, d_qs, d_qe = outcome
                full = {name: np.zeros_like(arr) for name, arr in tuned.arrays().items()}
                accumulate_question_gradients(tuned, question_ids, d_qs, d_qe, full)
                for name in grads:
                    grads[name] += full[name]
                epoch_loss += loss
                batch_used += 1
            if batch_used == 0:
                continue
            for name in grads:
                grads[name] /= batch_used
            adam_step(arrays, grads, adam)
            used += batch_used
        rate = skipped / max(len(qa_pairs), 1)
        logger.info(
            "qsft epoch %d/%d: mean loss %.6f, skipped %d/%d (%.1f%%)",
            epoch + 1, config.epochs, epoch_loss / max(used, 1), skipped, len(qa_pairs), 100 * rate,
        )
        if used == 0:
            logger.warning("qsft epoch %d: every example was skipped (no top-%d match)", epoch + 1, config.top_k)
    return tuned
