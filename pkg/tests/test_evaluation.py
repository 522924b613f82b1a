import json

import numpy as np
import pytest

from phraseindex.corpus import load_qa_jsonl
from phraseindex.encoder import init_params
from phraseindex.evaluation import (
    BenchmarkResult,
    benchmark_qps,
    exact_match,
    retrieval_accuracy,
    token_f1,
)
from phraseindex.indexing import build_phrase_dump
from phraseindex.search import PhraseSearcher, SearchConfig
from tests.conftest import write_jsonl


class TestExactMatch:
    def test_normalization_applied(self):
        assert exact_match("The Eiffel Tower!", ["eiffel tower"]) == 1
        assert exact_match("eiffel tower", ["The Louvre"]) == 0

    def test_max_over_golds(self):
        assert exact_match("paris", ["lyon", "Paris."]) == 1

    def test_requires_golds(self):
        with pytest.raises(ValueError):
            exact_match("x", [])


class TestTokenF1:
    def test_perfect_overlap(self):
        assert token_f1("the quick fox", ["quick fox"]) == pytest.approx(1.0)

    def test_partial_overlap_frozen(self):
        # "x y z" vs "y z w": overlap 2, P=2/3, R=2/3, F1=2/3
        assert token_f1("x y z", ["y z w"]) == pytest.approx(2 / 3)

    def test_no_overlap(self):
        assert token_f1("alpha beta", ["gamma delta"]) == pytest.approx(0.0)

    def test_duplicate_tokens_counted_once_each(self):
        # "b b" vs "b": common multiset has one b, P=1/2, R=1, F1=2/3
        assert token_f1("b b", ["b"]) == pytest.approx(2 / 3)

    def test_empty_after_normalization(self):
        assert token_f1("the", ["the"]) == pytest.approx(1.0)  # both normalize empty
        assert token_f1("the", ["fox"]) == pytest.approx(0.0)

    def test_max_over_golds(self):
        assert token_f1("a b", ["z z", "a b"]) == pytest.approx(1.0)


@pytest.fixture()
def searcher(small_corpus):
    params = init_params(len(small_corpus.vocabulary), dim=8, window=2, seed=2)
    dump = build_phrase_dump(params, small_corpus)
    return PhraseSearcher(dump, None, params, small_corpus.vocabulary, SearchConfig(k=30, max_span_len=4))


@pytest.fixture()
def qa_pairs(small_corpus, tmp_path):
    records = [
        {"question": "who recorded Thriller ?", "answer": "Michael Jackson"},
        {"question": "which album was recorded in 1982 ?", "answer": "Thriller"},
        {"question": "zzz entirely unknown words", "answer": "x"},
    ]
    return load_qa_jsonl(small_corpus, write_jsonl(tmp_path / "eval.jsonl", records))


class TestRetrievalAccuracy:
    def test_report_counts(self, searcher, qa_pairs):
        report = retrieval_accuracy(searcher, qa_pairs, ks=(1, 5))
        assert report.n_questions == 3
        assert report.n_scored == 2
        assert report.n_skipped == 1
        assert set(report.accuracy_at) == {1, 5}

    def test_accuracy_monotone_in_k(self, searcher, qa_pairs):
        report = retrieval_accuracy(searcher, qa_pairs, ks=(1, 3, 10))
        assert report.accuracy_at[1] <= report.accuracy_at[3] <= report.accuracy_at[10]

    def test_k_wider_than_configured_results(self, searcher, qa_pairs):
        # ks beyond the searcher's n_results must widen the result list
        report = retrieval_accuracy(searcher, qa_pairs, ks=(25,))
        assert 0.0 <= report.accuracy_at[25] <= 1.0

    def test_records_kept_on_request(self, searcher, qa_pairs):
        report = retrieval_accuracy(searcher, qa_pairs, ks=(1,), keep_records=True)
        assert len(report.records) == report.n_scored
        assert {"question", "answer", "prediction", "em", "f1"} <= set(report.records[0])

    def test_bad_ks_rejected(self, searcher, qa_pairs):
        with pytest.raises(ValueError):
            retrieval_accuracy(searcher, qa_pairs, ks=())
        with pytest.raises(ValueError):
            retrieval_accuracy(searcher, qa_pairs, ks=(0,))

    def test_json_round_trip(self, searcher, qa_pairs):
        report = retrieval_accuracy(searcher, qa_pairs, ks=(1,))
        payload = json.loads(report.to_json())
        assert payload["n_questions"] == 3
        assert "1" in payload["accuracy_at"]

    def test_text_table_mentions_all_metrics(self, searcher, qa_pairs):
        table = retrieval_accuracy(searcher, qa_pairs, ks=(1, 5)).to_text_table()
        for needle in ("exact match", "token F1", "accuracy@1", "accuracy@5"):
            assert needle in table


class TestBenchmark:
    def test_bookkeeping(self, searcher):
        questions = ["Michael Jackson"] * 14
        result = benchmark_qps(searcher, questions, batch_size=2, warmup_batches=2, runs=2)
        assert result.batch_size == 2
        assert result.batches_per_run == 7
        assert result.warmup_batches == 2
        assert result.measured_batches == 2 * (7 - 2)
        assert result.measured_questions == 2 * 5 * 2
        assert result.qps > 0
        assert result.p50_latency_ms <= result.p99_latency_ms

    def test_tail_questions_dropped(self, searcher):
        result = benchmark_qps(searcher, ["Michael Jackson"] * 11, batch_size=3, warmup_batches=1, runs=1)
        assert result.batches_per_run == 3

    def test_too_few_batches_rejected(self, searcher):
        with pytest.raises(ValueError, match="full batches"):
            benchmark_qps(searcher, ["Michael Jackson"] * 4, batch_size=2, warmup_batches=5)

    def test_csv_format(self, searcher):
        result = benchmark_qps(searcher, ["Michael Jackson"] * 8, batch_size=2, warmup_batches=1, runs=1)
        assert BenchmarkResult.CSV_HEADER == "batch_size,qps,p50_latency_ms,p99_latency_ms"
        row = result.to_csv_row()
        parts = row.split(",")
        assert len(parts) == 4
        assert int(parts[0]) == 2
        assert float(parts[1]) > 0

    def test_bad_parameters(self, searcher):
        with pytest.raises(ValueError):
            benchmark_qps(searcher, ["q"] * 10, batch_size=0)
        with pytest.raises(ValueError):
            benchmark_qps(searcher, ["q"] * 10, batch_size=2, runs=0)
