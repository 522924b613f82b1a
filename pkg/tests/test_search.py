import numpy as np
import pytest

from phraseindex.encoder import QuestionEmbedding, init_params
from phraseindex.indexing import PhraseDump, build_ivf, build_phrase_dump, quantize_dump
from phraseindex.search import (
    PhraseSearcher,
    SearchConfig,
    constrained_search,
    dedup,
    mips_topk,
    mips_topk_batch,
)
from tests import oracles
from tests.conftest import make_random_dump


def _manual_dump(vectors, token_pos=None, text="a b c d e f g h"):
    """Single-document, single-paragraph dump with the given rows."""
    vectors = np.asarray(vectors, dtype=np.float32)
    n = vectors.shape[0]
    pos = np.arange(n) if token_pos is None else np.asarray(token_pos)
    return PhraseDump(
        dim=vectors.shape[1],
        quant_mode="none",
        vectors=vectors,
        codes=None,
        scales=np.ones(n, dtype=np.float32),
        doc_ids=["doc0"],
        doc_ord=np.zeros(n, dtype=np.uint32),
        par_idx=np.zeros(n, dtype=np.uint32),
        token_pos=pos.astype(np.uint32),
        char_start=(2 * pos).astype(np.uint32),
        char_end=(2 * pos + 1).astype(np.uint32),
        texts={(0, 0): text},
    )


class TestMipsTopk:
    def test_matches_full_argsort(self, rng):
        dump = make_random_dump(rng)
        query = rng.normal(size=dump.dim)
        ids, scores = mips_topk(dump, None, query, k=7)
        exact = dump.matrix() @ query
        expected = np.lexsort((np.arange(dump.n_rows), -exact))[:7]
        np.testing.assert_array_equal(ids, expected)
        np.testing.assert_allclose(scores, exact[expected], rtol=1e-12)

    def test_tie_breaks_toward_lower_row(self):
        dump = _manual_dump(np.tile([[1.0, 0.0]], (4, 1)))
        ids, _ = mips_topk(dump, None, np.array([1.0, 0.0]), k=4)
        np.testing.assert_array_equal(ids, [0, 1, 2, 3])

    def test_k_larger_than_rows(self, rng):
        dump = make_random_dump(rng)
        ids, _ = mips_topk(dump, None, rng.normal(size=dump.dim), k=10 * dump.n_rows)
        assert len(ids) == dump.n_rows

    def test_batch_matches_sequential(self, rng):
        dump = make_random_dump(rng)
        queries = rng.normal(size=(5, dump.dim))
        batched = mips_topk_batch(dump, None, queries, k=6)
        for col in range(5):
            ids, scores = mips_topk(dump, None, queries[col], k=6)
            np.testing.assert_array_equal(batched[col][0], ids)
            np.testing.assert_allclose(batched[col][1], scores, rtol=1e-12)

    def test_ivf_full_probe_equals_exact(self, rng):
        dump = make_random_dump(rng, max_rows=80)
        k_clusters = min(6, dump.n_rows)
        ivf = build_ivf(dump, n_clusters=k_clusters, seed=0)
        query = rng.normal(size=dump.dim)
        exact_ids, exact_scores = mips_topk(dump, None, query, k=10)
        ivf_ids, ivf_scores = mips_topk(dump, ivf, query, k=10, n_probe=k_clusters)
        np.testing.assert_array_equal(ivf_ids, exact_ids)
        np.testing.assert_allclose(ivf_scores, exact_scores, rtol=1e-12)

    def test_ivf_partial_probe_scores_only_probed_rows(self, rng):
        dump = make_random_dump(rng, max_rows=80)
        if dump.n_rows < 8:
            pytest.skip("dump too small for a meaningful partial probe")
        ivf = build_ivf(dump, n_clusters=4, seed=0)
        query = rng.normal(size=dump.dim)
        ids, _ = mips_topk(dump, ivf, query, k=dump.n_rows, n_probe=1)
        d2 = np.sum((ivf.centroids.astype(np.float64) - query) ** 2, axis=1)
        best_cluster = int(np.lexsort((np.arange(4), d2))[0])
        assert set(ids.tolist()) == set(ivf.lists[best_cluster].tolist())


class TestConstrainedSearch:
    def test_frozen_three_token_ordering(self):
        dump = _manual_dump(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), text="a b c")
        q = QuestionEmbedding(q_start=np.array([1.0, 0.0]), q_end=np.array([0.5, 1.0]))
        results = constrained_search(dump, None, q, SearchConfig(k=3, max_span_len=2))
        got = [(r.start_row, r.end_row, r.score) for r in results]
        # scores worked out by hand; the 1.5 tie goes to the earlier start row
        assert got == [
            (2, 2, pytest.approx(2.5)),
            (0, 1, pytest.approx(2.0)),
            (0, 0, pytest.approx(1.5)),
            (1, 2, pytest.approx(1.5)),
            (1, 1, pytest.approx(1.0)),
        ]

    def test_matches_brute_force_with_full_seeds(self, rng):
        for _ in range(8):
            dump = make_random_dump(rng)
            dump.texts = {
                (int(dump.doc_ord[s]), int(dump.par_idx[s])): "x " * (int(dump.char_end[e - 1]) + 5)
                for s, e in zip(dump.par_row_start, dump.par_row_end)
            }
            q = QuestionEmbedding(
                q_start=rng.normal(size=dump.dim), q_end=rng.normal(size=dump.dim)
            )
            max_len = int(rng.integers(1, 8))
            results = constrained_search(
                dump, None, q, SearchConfig(k=dump.n_rows, max_span_len=max_len)
            )
            expected = oracles.brute_force_spans(
                dump.matrix().astype(np.float64),
                dump.row_par,
                dump.token_pos.astype(np.int64),
                q.q_start,
                q.q_end,
                max_len,
            )
            assert [(r.start_row, r.end_row) for r in results] == [(i, j) for i, j, _ in expected]
            np.testing.assert_allclose(
                [r.score for r in results], [s for _, _, s in expected], rtol=1e-9
            )

    def test_span_length_constraint_by_positions_not_rows(self):
        # rows 0 and 1 are adjacent in the dump but 10 tokens apart (filtered gap)
        dump = _manual_dump(np.eye(2, 3, dtype=np.float32), token_pos=np.array([0, 10]))
        q = QuestionEmbedding(q_start=np.ones(3), q_end=np.ones(3))
        results = constrained_search(dump, None, q, SearchConfig(k=2, max_span_len=5))
        assert {(r.start_row, r.end_row) for r in results} == {(0, 0), (1, 1)}
        wide = constrained_search(dump, None, q, SearchConfig(k=2, max_span_len=11))
        assert (0, 1) in {(r.start_row, r.end_row) for r in wide}

    def test_spans_never_cross_paragraphs(self, rng):
        dump = make_random_dump(rng)
        dump.texts = {key: "y" * 500 for key in dump.par_keys}
        q = QuestionEmbedding(q_start=rng.normal(size=dump.dim), q_end=rng.normal(size=dump.dim))
        results = constrained_search(dump, None, q, SearchConfig(k=dump.n_rows, max_span_len=50))
        for r in results:
            assert dump.row_par[r.start_row] == dump.row_par[r.end_row]
            assert r.start_row <= r.end_row

    def test_partner_completion_recovers_weak_other_side(self):
        # row 1 scores high only as an end; the (0, 1) span must still surface
        dump = _manual_dump(np.array([[5.0, 0.0], [0.0, 5.0], [0.1, 0.1]]), text="a b c")
        q = QuestionEmbedding(q_start=np.array([1.0, 0.0]), q_end=np.array([0.0, 1.0]))
        results = constrained_search(dump, None, q, SearchConfig(k=1, max_span_len=3))
        assert (0, 1) in {(r.start_row, r.end_row) for r in results}


class TestDedup:
    def _mk(self, doc, par, text, score, row=0):
        from phraseindex.corpus import PhraseSpan
        from phraseindex.search import SearchResult

        return SearchResult(
            span=PhraseSpan(doc_id=doc, paragraph=par, start=row, end=row),
            score=score,
            text=text,
            start_row=row,
            end_row=row,
            char_start=0,
            char_end=1,
        )

    def test_same_normalized_text_collapses(self):
        results = [
            self._mk("d", 0, "The Score", 3.0),
            self._mk("d", 0, "score", 2.0, row=1),
            self._mk("d", 0, "other", 1.0, row=2),
        ]
        out = dedup(results)
        assert [r.text for r in out] == ["The Score", "other"]

    def test_distinct_paragraphs_kept(self):
        results = [self._mk("d", 0, "same", 3.0), self._mk("d", 1, "same", 2.0)]
        assert len(dedup(results)) == 2

    def test_distinct_documents_kept(self):
        results = [self._mk("a", 0, "same", 3.0), self._mk("b", 0, "same", 2.0)]
        assert len(dedup(results)) == 2


class TestPhraseSearcher:
    @pytest.fixture()
    def searcher(self, small_corpus):
        params = init_params(len(small_corpus.vocabulary), dim=6, window=2, seed=1)
        dump = build_phrase_dump(params, small_corpus)
        return PhraseSearcher(dump, None, params, small_corpus.vocabulary, SearchConfig(k=20, n_results=5))

    def test_requires_texts(self, small_corpus):
        params = init_params(len(small_corpus.vocabulary), dim=6, window=2, seed=1)
        dump = build_phrase_dump(params, small_corpus)
        dump.texts = None
        with pytest.raises(ValueError, match="texts"):
            PhraseSearcher(dump, None, params, small_corpus.vocabulary)

    def test_dim_mismatch_rejected(self, small_corpus):
        params = init_params(len(small_corpus.vocabulary), dim=6, window=2, seed=1)
        dump = build_phrase_dump(params, small_corpus)
        other = init_params(len(small_corpus.vocabulary), dim=4, window=2, seed=1)
        with pytest.raises(ValueError, match="dim"):
            PhraseSearcher(dump, None, other, small_corpus.vocabulary)

    def test_search_returns_valid_results(self, searcher, small_corpus):
        results = searcher.search("who recorded Thriller ?")
        assert 0 < len(results) <= 5
        for r in results:
            par = small_corpus.paragraph(r.span.doc_id, r.span.paragraph)
            assert r.text == par.text[r.char_start : r.char_end] or r.text
            assert r.span.start <= r.span.end
        scores = [r.score for r in results]
        assert scores == sorted(scores, reverse=True)

    def test_results_are_deduplicated(self, searcher):
        results = searcher.search("Michael Jackson")
        keys = [(r.span.doc_id, r.span.paragraph, r.text.lower()) for r in results]
        assert len(keys) == len(set(keys))

    def test_empty_question_rejected(self, searcher):
        with pytest.raises(ValueError, match="empty"):
            searcher.search("   ")

    def test_oov_question_rejected(self, searcher):
        with pytest.raises(ValueError, match="no in-vocabulary"):
            searcher.search("zzz qqq www")

    def test_batch_search_matches_sequential(self, searcher):
        questions = ["Michael Jackson", "the British throne", "zzz unknown zzz"]
        batched = searcher.batch_search(questions)
        assert batched[2] == []
        for slot in (0, 1):
            single = searcher.search(questions[slot])
            assert [(r.start_row, r.end_row) for r in batched[slot]] == [
                (r.start_row, r.end_row) for r in single
            ]

    def test_quantized_dump_searchable(self, small_corpus):
        params = init_params(len(small_corpus.vocabulary), dim=6, window=2, seed=1)
        dump = quantize_dump(build_phrase_dump(params, small_corpus))
        searcher = PhraseSearcher(dump, None, params, small_corpus.vocabulary)
        assert searcher.search("Michael Jackson")

    def test_to_json_field_names(self, searcher):
        payload = searcher.search("Michael Jackson")[0].to_json()
        assert set(payload) == {
            "text",
            "score",
            "doc_id",
            "paragraph",
            "start_token",
            "end_token",
            "char_start",
            "char_end",
        }


class TestSearchConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SearchConfig(k=0)
        with pytest.raises(ValueError):
            SearchConfig(max_span_len=0)
        with pytest.raises(ValueError):
            SearchConfig(n_probe=0)
        assert SearchConfig(n_probe=None).n_probe is None
