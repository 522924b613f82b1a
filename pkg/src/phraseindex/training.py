"""Training objective and loop for the span encoders.

Three loss terms, each a mean over the batch:

* single-passage: cross-entropy of the gold start/end positions under a
  softmax over the tokens of the gold paragraph;
* distillation: KL(P || P_teacher) of those same distributions against
  per-token teacher distributions;
* batch negatives: each question scores the gold start/end vectors of every
  example in the batch (its own on the diagonal) plus cached gold vectors
  from the previous C batches, held in a FIFO queue as gradient-free
  snapshots.

The total objective is the weighted sum of the three means.  Optimization is
Adam with global gradient-norm clipping.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, Paragraph, QAPair, question_token_ids
from .encoder import (
    EncoderParams,
    accumulate_passage_gradients,
    accumulate_question_gradients,
    encode_passage,
    encode_question,
    init_params,
    zero_gradients,
)

logger = logging.getLogger(__name__)

TEACHER_FLOOR = 1e-12


@dataclass
class LossWeights:
    single: float = 1.0
    distill: float = 2.0
    negatives: float = 4.0

    def __post_init__(self) -> None:
        if min(self.single, self.distill, self.negatives) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.single == self.distill == self.negatives == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class TrainConfig:
    batch_size: int = 84
    prebatch_c: int = 2
    epochs: int = 4
    warmup_epochs: int | None = None  # defaults to epochs // 2
    lr: float = 3e-5
    lambda1: float = 1.0
    lambda2: float = 2.0
    lambda3: float = 4.0
    seed: int = 0
    clip_norm: float = 1.0
    dim: int = 64
    window: int = 2

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.prebatch_c < 0:
            raise ValueError("batch_size must be >= 1, epochs and prebatch_c >= 0")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")

    @property
    def resolved_warmup(self) -> int:
        return self.epochs // 2 if self.warmup_epochs is None else self.warmup_epochs

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)


_CONFIG_FIELDS = {
    "batch_size": int,
    "prebatch_c": int,
    "epochs": int,
    "warmup_epochs": int,
    "lr": float,
    "lambda1": float,
    "lambda2": float,
    "lambda3": float,
    "seed": int,
    "clip_norm": float,
    "dim": int,
    "window": int,
}


def read_kv_file(path) -> dict[str, str]:
    """Parse a key-value text file: one `key = value` per line, # comments."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, _, value = line.partition("=")
            else:
                key, _, value = line.partition(" ")
            key, value = key.strip(), value.strip()
            if not key or not value:
                raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
            out[key] = value
    return out


def load_train_config(path=None, overrides: Mapping[str, object] | None = None) -> TrainConfig:
    """Build a TrainConfig from an optional key-value file plus overrides."""
    raw: dict[str, object] = {}
    if path is not None:
        for key, value in read_kv_file(path).items():
            if key not in _CONFIG_FIELDS:
                raise ValueError(f"{path}: unknown config key {key!r}")
            raw[key] = _CONFIG_FIELDS[key](value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _CONFIG_FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        raw[key] = _CONFIG_FIELDS[key](value)
    return TrainConfig(**raw)


def save_teacher_file(path, teachers: Mapping[int, tuple[np.ndarray, np.ndarray]]) -> None:
    """Write teacher distributions keyed by example ordinal (npz container).

    Each entry stacks the start and end distributions into a (2, m) array.
    """
    np.savez(path, **{str(idx): np.stack([s, e]) for idx, (s, e) in teachers.items()})


def load_teacher_file(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    data = np.load(path)
    out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for key in data.files:
        arr = data[key]
        if arr.ndim != 2 or arr.shape[0] != 2:
            raise ValueError(f"teacher entry {key!r} must be a (2, m) array, got {arr.shape}")
        out[int(key)] = (arr[0], arr[1])
    return out


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=axis, keepdims=True)


def single_passage_loss(
    h: np.ndarray,
    q_start: np.ndarray,
    q_end: np.ndarray,
    gold_start: int,
    gold_end: int,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Mean of the start and end cross-entropies over the paragraph tokens.

    Returns (loss, d_h, d_q_start, d_q_end).
    """
    m = h.shape[0]
    if m < 1:
        raise ValueError("paragraph must have at least one token")
    if not (0 <= gold_start < m and 0 <= gold_end < m):
        raise ValueError(f"gold positions ({gold_start}, {gold_end}) out of range for m={m}")
    z_start = h @ q_start
    z_end = h @ q_end
    p_start = softmax(z_start)
    p_end = softmax(z_end)
    loss = -0.5 * (np.log(p_start[gold_start]) + np.log(p_end[gold_end]))
    dz_start = 0.5 * p_start
    dz_start[gold_start] -= 0.5
    dz_end = 0.5 * p_end
    dz_end[gold_end] -= 0.5
    d_h = np.outer(dz_start, q_start) + np.outer(dz_end, q_end)
    return float(loss), d_h, h.T @ dz_start, h.T @ dz_end


def _validate_distribution(p: np.ndarray, name: str) -> None:
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError(f"{name} does not sum to 1 (got {float(p.sum()):.8f})")


def _kl(p: np.ndarray, teacher: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(p || teacher) plus its gradient with respect to the logits of p."""
    if p.shape != teacher.shape:
        raise ValueError("distribution length mismatch")
    if np.any((teacher <= 0) & (p > 0)):
        raise ValueError("teacher has zero mass where the model is positive; smooth the teacher")
    ratio = np.zeros_like(p)
    pos = p > 0
    ratio[pos] = np.log(p[pos]) - np.log(teacher[pos])
    kl = float((p[pos] * ratio[pos]).sum())
    return kl, p * (ratio - kl)


def distill_loss(
    p_start: np.ndarray,
    p_end: np.ndarray,
    teacher_start: np.ndarray,
    teacher_end: np.ndarray,
) -> float:
    """Mean of KL(P_start || teacher_start) and KL(P_end || teacher_end)."""
    for p, name in ((p_start, "p_start"), (p_end, "p_end"), (teacher_start, "teacher_start"), (teacher_end, "teacher_end")):
        _validate_distribution(np.asarray(p), name)
    ks, _ = _kl(np.asarray(p_start), np.asarray(teacher_start))
    ke, _ = _kl(np.asarray(p_end), np.asarray(teacher_end))
    return 0.5 * (ks + ke)


def distill_loss_with_grad(
    p_start: np.ndarray,
    p_end: np.ndarray,
    teacher_start: np.ndarray,
    teacher_end: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Distillation loss plus gradients with respect to the start/end logits."""
    ks, dz_start = _kl(p_start, teacher_start)
    ke, dz_end = _kl(p_end, teacher_end)
    return 0.5 * (ks + ke), 0.5 * dz_start, 0.5 * dz_end


def clamp_teacher(dist: np.ndarray) -> np.ndarray:
    """Floor a teacher distribution so KL stays finite."""
    return np.maximum(np.asarray(dist, dtype=np.float64), TEACHER_FLOOR)


class PrebatchQueue:
    """FIFO queue of gold-vector snapshots from the last ``capacity`` batches."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._entries: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=capacity or None)
        if capacity == 0:
            self._entries = deque(maxlen=0)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, g_start: np.ndarray, g_end: np.ndarray) -> None:
        """Snapshot (copy) the batch gold matrices; oldest entry is evicted."""
        if self.capacity == 0:
            return
        if g_start.shape != g_end.shape or g_start.ndim != 2:
            raise ValueError("queue entries must be matching (B, d) matrices")
        if self._entries and self._entries[0][0].shape[1] != g_start.shape[1]:
            raise ValueError("queue entry dimension mismatch")
        self._entries.append((g_start.copy(), g_end.copy()))

    def cached(self) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Concatenated cached matrices, oldest first; (None, None) when empty."""
        if not self._entries:
            return None, None
        return (
            np.concatenate([e[0] for e in self._entries], axis=0),
            np.concatenate([e[1] for e in self._entries], axis=0),
        )


@dataclass
class TrainingBatch:
    """Encoded batch: per-example token matrices, gold positions, queries."""

    hs: list[np.ndarray]
    gold_starts: list[int]
    gold_ends: list[int]
    q_starts: np.ndarray  # (B, d)
    q_ends: np.ndarray    # (B, d)
    teacher_starts: list[np.ndarray | None] = field(default_factory=list)
    teacher_ends: list[np.ndarray | None] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.hs)


@dataclass
class BatchNegativeGrads:
    d_q_starts: np.ndarray
    d_q_ends: np.ndarray
    d_gold_starts: np.ndarray
    d_gold_ends: np.ndarray


def batch_negative_loss(
    batch: TrainingBatch,
    queue: PrebatchQueue | None = None,
) -> tuple[float, BatchNegativeGrads]:
    """In-batch (plus cached pre-batch) negative log-likelihood.

    Each question scores every gold vector in the batch plus the cached
    columns; the softmax positive is the question's own gold (the diagonal).
    Cached columns are constants and receive no gradient.
    """
    b = batch.size
    if b < 1:
        raise ValueError("batch is empty")
    d = batch.q_starts.shape[1]
    g_start = np.stack([batch.hs[i][batch.gold_starts[i]] for i in range(b)])
    g_end = np.stack([batch.hs[i][batch.gold_ends[i]] for i in range(b)])
    cached_start, cached_end = (None, None) if queue is None else queue.cached()
    cols_start = g_start if cached_start is None else np.concatenate([g_start, cached_start], axis=0)
    cols_end = g_end if cached_end is None else np.concatenate([g_end, cached_end], axis=0)
    if cols_start.shape[1] != d:
        raise ValueError("cached column dimension mismatch")

    p_start = softmax(batch.q_starts @ cols_start.T, axis=1)
    p_end = softmax(batch.q_ends @ cols_end.T, axis=1)
    diag = np.arange(b)
    loss = -0.5 * float(np.log(p_start[diag, diag]).mean() + np.log(p_end[diag, diag]).mean())

    ds_start = p_start / (2.0 * b)
    ds_start[diag, diag] -= 0.5 / b
    ds_end = p_end / (2.0 * b)
    ds_end[diag, diag] -= 0.5 / b
    grads = BatchNegativeGrads(
        d_q_starts=ds_start @ cols_start,
        d_q_ends=ds_end @ cols_end,
        d_gold_starts=ds_start[:, :b].T @ batch.q_starts,
        d_gold_ends=ds_end[:, :b].T @ batch.q_ends,
    )
    return loss, grads


def total_loss(single: float, distill: float, negatives: float, weights: LossWeights) -> float:
    return weights.single * single + weights.distill * distill + weights.negatives * negatives


@dataclass
class AdamState:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(arrays: Mapping[str, np.ndarray], lr: float, clip_norm: float | None = 1.0) -> AdamState:
    state = AdamState(lr=lr, clip_norm=clip_norm)
    state.m = {name: np.zeros_like(arr) for name, arr in arrays.items()}
    state.v = {name: np.zeros_like(arr) for name, arr in arrays.items()}
    return state


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global norm is at most max_norm."""
    total = 0.0
    for arr in grads.values():
        total += float(np.sum(arr * arr))
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise ValueError("non-finite gradient norm")
    if norm > max_norm > 0:
        scale = max_norm / norm
        for arr in grads.values():
            arr *= scale
    return norm


def adam_step(arrays: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One Adam update, in place, over exactly the keys of ``state.m``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name!r}")
    if state.clip_norm is not None:
        clip_gradients(grads, state.clip_norm)
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in state.m:
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        arrays[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainingExample:
    paragraph: Paragraph
    question_ids: list[int]
    gold_start: int
    gold_end: int
    teacher_start: np.ndarray | None = None
    teacher_end: np.ndarray | None = None


def prepare_examples(
    corpus: Corpus,
    qa_pairs: Sequence[QAPair],
    teachers: Mapping[int, tuple[np.ndarray, np.ndarray]] | None = None,
) -> list[TrainingExample]:
    """Resolve QA pairs against the corpus; pairs without gold spans are skipped."""
    examples: list[TrainingExample] = []
    skipped = 0
    for idx, qa in enumerate(qa_pairs):
        if qa.gold_span is None:
            skipped += 1
            continue
        par = corpus.paragraph(qa.gold_span.doc_id, qa.gold_span.paragraph)
        ids = question_token_ids(corpus, qa.question)
        if not ids:
            skipped += 1
            continue
        ts = te = None
        if teachers is not None and idx in teachers:
            raw_s, raw_e = teachers[idx]
            if len(raw_s) != len(par) or len(raw_e) != len(par):
                raise ValueError(f"teacher length mismatch for example {idx}")
            ts, te = clamp_teacher(raw_s), clamp_teacher(raw_e)
        examples.append(
            TrainingExample(
                paragraph=par,
                question_ids=ids,
                gold_start=qa.gold_span.start,
                gold_end=qa.gold_span.end,
                teacher_start=ts,
                teacher_end=te,
            )
        )
    if skipped:
        logger.warning("prepare_examples: skipped %d of %d pairs (no gold span or no known question tokens)", skipped, len(qa_pairs))
    if not examples:
        raise ValueError("no trainable examples")
    return examples


def _encode_batch(params: EncoderParams, examples: Sequence[TrainingExample]) -> TrainingBatch:
    hs = [encode_passage(params, ex.paragraph) for ex in examples]
    qs = [encode_question(params, ex.question_ids) for ex in examples]
    return TrainingBatch(
        hs=hs,
        gold_starts=[ex.gold_start for ex in examples],
        gold_ends=[ex.gold_end for ex in examples],
        q_starts=np.stack([q.q_start for q in qs]),
        q_ends=np.stack([q.q_end for q in qs]),
        teacher_starts=[ex.teacher_start for ex in examples],
        teacher_ends=[ex.teacher_end for ex in examples],
    )


def batch_loss_and_gradients(
    params: EncoderParams,
    examples: Sequence[TrainingExample],
    weights: LossWeights,
    queue: PrebatchQueue | None,
) -> tuple[float, dict[str, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Weighted batch objective, its parameter gradients, and the batch's
    gold start/end vectors (a forward-pass snapshot for the pre-batch queue).

    Examples without teacher distributions contribute zero to the
    distillation mean (the denominator stays the batch size).
    """
    batch = _encode_batch(params, examples)
    b = batch.size
    grads = zero_gradients(params)
    d_hs = [np.zeros_like(h) for h in batch.hs]
    d_q_starts = np.zeros_like(batch.q_starts)
    d_q_ends = np.zeros_like(batch.q_ends)

    loss_single = 0.0
    loss_distill = 0.0
    for i in range(b):
        h = batch.hs[i]
        qs_i, qe_i = batch.q_starts[i], batch.q_ends[i]
        if weights.single > 0:
            li, dh, dqs, dqe = single_passage_loss(h, qs_i, qe_i, batch.gold_starts[i], batch.gold_ends[i])
            loss_single += li / b
            scale = weights.single / b
            d_hs[i] += scale * dh
            d_q_starts[i] += scale * dqs
            d_q_ends[i] += scale * dqe
        if weights.distill > 0 and batch.teacher_starts[i] is not None:
            p_start = softmax(h @ qs_i)
            p_end = softmax(h @ qe_i)
            ld, dz_s, dz_e = distill_loss_with_grad(p_start, p_end, batch.teacher_starts[i], batch.teacher_ends[i])
            loss_distill += ld / b
            scale = weights.distill / b
            d_hs[i] += scale * (np.outer(dz_s, qs_i) + np.outer(dz_e, qe_i))
            d_q_starts[i] += scale * (h.T @ dz_s)
            d_q_ends[i] += scale * (h.T @ dz_e)

    loss_neg = 0.0
    if weights.negatives > 0:
        loss_neg, neg = batch_negative_loss(batch, queue)
        d_q_starts += weights.negatives * neg.d_q_starts
        d_q_ends += weights.negatives * neg.d_q_ends
        for i in range(b):
            d_hs[i][batch.gold_starts[i]] += weights.negatives * neg.d_gold_starts[i]
            d_hs[i][batch.gold_ends[i]] += weights.negatives * neg.d_gold_ends[i]

    for i, ex in enumerate(examples):
        accumulate_passage_gradients(params, ex.paragraph, d_hs[i], grads)
        accumulate_question_gradients(params, ex.question_ids, d_q_starts[i], d_q_ends[i], grads)

    snapshot = (
        np.stack([batch.hs[i][batch.gold_starts[i]] for i in range(b)]),
        np.stack([batch.hs[i][batch.gold_ends[i]] for i in range(b)]),
    )
    return total_loss(loss_single, loss_distill, loss_neg, weights), grads, snapshot


def train_phrase_encoders(
    corpus: Corpus,
    qa_pairs: Sequence[QAPair],
    config: TrainConfig,
    teachers: Mapping[int, tuple[np.ndarray, np.ndarray]] | None = None,
    init: EncoderParams | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> EncoderParams:
    """Train both encoders from scratch (or from ``init``) and return them.

    The pre-batch queue only participates after the warm-up epochs; until
    then the negative term uses in-batch golds alone.
    """
    examples = prepare_examples(corpus, qa_pairs, teachers)
    params = init.copy() if init is not None else init_params(len(corpus.vocabulary), config.dim, config.window, config.seed)
    weights = config.weights()
    rng = np.random.default_rng(config.seed)
    adam = init_adam(params.arrays(), lr=config.lr, clip_norm=config.clip_norm)
    queue = PrebatchQueue(config.prebatch_c)
    warmup = config.resolved_warmup

    for epoch in range(config.epochs):
        prebatch_on = weights.negatives > 0 and config.prebatch_c > 0 and epoch >= warmup
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [examples[i] for i in order[lo : lo + config.batch_size]]
            loss, grads, snapshot = batch_loss_and_gradients(params, chunk, weights, queue if prebatch_on else None)
            adam_step(params.arrays(), grads, adam)
            if prebatch_on:
                queue.push(*snapshot)
            epoch_loss += loss
            n_batches += 1
        mean_loss = epoch_loss / max(n_batches, 1)
        logger.info("epoch %d/%d: mean batch loss %.6f%s", epoch + 1, config.epochs, mean_loss, " (pre-batch on)" if prebatch_on else "")
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return params
