"""Retrieval metrics and throughput benchmarking.

Exact match and token F1 follow the usual extractive-QA conventions: both
sides are normalized (lowercase, no punctuation or articles, collapsed
whitespace), F1 uses bag-of-tokens overlap, and both take the max over the
gold answers.  Retrieval accuracy at k asks whether any of the top-k
results is an exact match.  The throughput benchmark runs batches through
the searcher, drops the first few iterations as warmup, and reports the
median QPS of repeated runs plus latency percentiles.
"""
from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import QAPair, normalize_answer
from .search import PhraseSearcher, SearchConfig


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    """1 when the prediction normalizes equal to any gold answer."""
    if not golds:
        raise ValueError("at least one gold answer is required")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def _f1_single(prediction: str, gold: str) -> float:
    pred_toks = normalize_answer(prediction).split()
    gold_toks = normalize_answer(gold).split()
    if not pred_toks or not gold_toks:
        return float(pred_toks == gold_toks)
    common = Counter(pred_toks) & Counter(gold_toks)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_toks)
    recall = overlap / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, golds: Sequence[str]) -> float:
    """Bag-of-tokens F1, maximized over the gold answers."""
    if not golds:
        raise ValueError("at least one gold answer is required")
    return max(_f1_single(prediction, g) for g in golds)


@dataclass
class EvalReport:
    n_questions: int
    n_scored: int
    n_skipped: int
    exact_match: float
    f1: float
    accuracy_at: dict[int, float]
    records: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "n_questions": self.n_questions,
            "n_scored": self.n_scored,
            "n_skipped": self.n_skipped,
            "exact_match": self.exact_match,
            "f1": self.f1,
            "accuracy_at": {str(k): v for k, v in self.accuracy_at.items()},
        }
        return json.dumps(payload, indent=2)

    def to_text_table(self) -> str:
        lines = [
            f"{'questions':>14}  {self.n_questions}",
            f"{'scored':>14}  {self.n_scored}",
            f"{'skipped':>14}  {self.n_skipped}",
            f"{'exact match':>14}  {self.exact_match:.4f}",
            f"{'token F1':>14}  {self.f1:.4f}",
        ]
        for k in sorted(self.accuracy_at):
            lines.append(f"{f'accuracy@{k}':>14}  {self.accuracy_at[k]:.4f}")
        return "\n".join(lines)


def retrieval_accuracy(
    searcher: PhraseSearcher,
    qa_pairs: Sequence[QAPair],
    ks: Sequence[int] = (1, 5, 10),
    config: SearchConfig | None = None,
    keep_records: bool = False,
) -> EvalReport:
    """Top-k retrieval accuracy plus top-1 EM/F1 over a QA set.

    Works against whatever dump the searcher holds, so reduced corpora
    (for example only the gold paragraphs of the QA set) evaluate the same
    way as full ones.  Questions the searcher cannot encode are skipped and
    counted.
    """
    if not ks or min(ks) < 1:
        raise ValueError("ks must be non-empty positive ints")
    ks = sorted(set(int(k) for k in ks))
    base = config or searcher.config
    cfg = SearchConfig(
        k=max(base.k, max(ks)),
        max_span_len=base.max_span_len,
        n_probe=base.n_probe,
        n_results=max(base.n_results, max(ks)),
    )
    hits = {k: 0 for k in ks}
    em_total = 0.0
    f1_total = 0.0
    scored = 0
    skipped = 0
    records = []
    for qa in qa_pairs:
        try:
            results = searcher.search(qa.question, cfg)
        except ValueError:
            skipped += 1
            continue
        scored += 1
        golds = [qa.answer]
        ems = [exact_match(r.text, golds) for r in results]
        top1_em = ems[0] if ems else 0
        top1_f1 = token_f1(results[0].text, golds) if results else 0.0
        em_total += top1_em
        f1_total += top1_f1
        for k in ks:
            if any(ems[:k]):
                hits[k] += 1
        if keep_records:
            records.append(
                {
                    "question": qa.question,
                    "answer": qa.answer,
                    "prediction": results[0].text if results else "",
                    "em": top1_em,
                    "f1": top1_f1,
                }
            )
    denom = max(scored, 1)
    return EvalReport(
        n_questions=len(qa_pairs),
        n_scored=scored,
        n_skipped=skipped,
        exact_match=em_total / denom,
        f1=f1_total / denom,
        accuracy_at={k: hits[k] / denom for k in ks},
        records=records,
    )


@dataclass
class BenchmarkResult:
    batch_size: int
    qps: float
    p50_latency_ms: float
    p99_latency_ms: float
    runs: int
    batches_per_run: int
    warmup_batches: int
    measured_batches: int
    measured_questions: int

    CSV_HEADER = "batch_size,qps,p50_latency_ms,p99_latency_ms"

    def to_csv_row(self) -> str:
        return f"{self.batch_size},{self.qps:.2f},{self.p50_latency_ms:.3f},{self.p99_latency_ms:.3f}"


def benchmark_qps(
    searcher: PhraseSearcher,
    questions: Sequence[str],
    batch_size: int = 64,
    warmup_batches: int = 5,
    runs: int = 3,
    config: SearchConfig | None = None,
) -> BenchmarkResult:
    """Median-of-runs QPS with the first ``warmup_batches`` excluded.

    The question list is chunked into fixed-size batches (the tail is
    dropped); each run must contain at least one measured batch beyond the
    warmup.  Excluded batches count toward neither time nor questions.
    """
    if batch_size < 1 or runs < 1 or warmup_batches < 0:
        raise ValueError("batch_size and runs must be >= 1, warmup_batches >= 0")
    batches = [
        list(questions[lo : lo + batch_size])
        for lo in range(0, len(questions) - batch_size + 1, batch_size)
    ]
    if len(batches) <= warmup_batches:
        raise ValueError(
            f"need more than {warmup_batches} full batches of {batch_size} questions, got {len(batches)}"
        )
    run_qps = []
    measured_latencies: list[float] = []
    measured_batches = 0
    measured_questions = 0
    for _ in range(runs):
        latencies = []
        for batch in batches:
            start = time.perf_counter()
            searcher.batch_search(batch, config)
            latencies.append(time.perf_counter() - start)
        kept = latencies[warmup_batches:]
        answered = sum(len(b) for b in batches[warmup_batches:])
        run_qps.append(answered / sum(kept))
        measured_latencies.extend(kept)
        measured_batches += len(kept)
        measured_questions += answered
    lat_ms = np.array(measured_latencies) * 1000.0
    return BenchmarkResult(
        batch_size=batch_size,
        qps=float(np.median(run_qps)),
        p50_latency_ms=float(np.percentile(lat_ms, 50)),
        p99_latency_ms=float(np.percentile(lat_ms, 99)),
        runs=runs,
        batches_per_run=len(batches),
        warmup_batches=warmup_batches,
        measured_batches=measured_batches,
        measured_questions=measured_questions,
    )
