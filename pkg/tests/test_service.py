import json
import logging

import pytest
from fastapi.testclient import TestClient

from phraseindex.corpus import ingest_jsonl
from phraseindex.encoder import init_params, save_params
from phraseindex.indexing import build_ivf, build_phrase_dump, save_index
from phraseindex.search import PhraseSearcher
from phraseindex.service import (
    ENV_BIND,
    ENV_INDEX,
    ServiceConfig,
    create_app,
    load_searcher,
    load_service_config,
)


@pytest.fixture()
def searcher(small_corpus):
    params = init_params(len(small_corpus.vocabulary), dim=6, window=2, seed=0)
    dump = build_phrase_dump(params, small_corpus)
    return PhraseSearcher(dump, None, params, small_corpus.vocabulary)


@pytest.fixture()
def client(searcher):
    app = create_app(searcher, ServiceConfig(default_k=5, max_k=50, max_batch_size=4))
    return TestClient(app)


class TestSearchEndpoint:
    def test_basic_search(self, client):
        resp = client.get("/search", params={"q": "Michael Jackson", "k": 3})
        assert resp.status_code == 200
        hits = resp.json()
        assert 0 < len(hits) <= 3
        assert set(hits[0]) == {
            "text",
            "score",
            "doc_id",
            "paragraph",
            "start_token",
            "end_token",
            "char_start",
            "char_end",
        }
        scores = [h["score"] for h in hits]
        assert scores == sorted(scores, reverse=True)

    def test_default_k(self, client):
        resp = client.get("/search", params={"q": "Michael Jackson"})
        assert resp.status_code == 200
        assert len(resp.json()) <= 5

    def test_missing_q_is_400(self, client):
        assert client.get("/search").status_code == 400

    def test_blank_q_is_400(self, client):
        assert client.get("/search", params={"q": "   "}).status_code == 400

    def test_oov_question_is_400(self, client):
        assert client.get("/search", params={"q": "zzzz qqqq"}).status_code == 400

    def test_k_out_of_range_is_400(self, client):
        assert client.get("/search", params={"q": "x", "k": 0}).status_code == 400
        assert client.get("/search", params={"q": "x", "k": 51}).status_code == 400

    def test_non_numeric_k_is_400(self, client):
        assert client.get("/search", params={"q": "x", "k": "many"}).status_code == 400

    def test_internal_error_is_500(self, searcher, monkeypatch):
        def boom(*args, **kwargs):
            raise RuntimeError("exploded")

        monkeypatch.setattr(searcher, "search", boom)
        client = TestClient(create_app(searcher, ServiceConfig()), raise_server_exceptions=False)
        resp = client.get("/search", params={"q": "Michael Jackson"})
        assert resp.status_code == 500
        assert "internal error" in resp.json()["detail"]


class TestBatchEndpoint:
    def test_batch_matches_sequential(self, client):
        questions = ["Michael Jackson", "the British throne"]
        resp = client.post("/batch-search", json={"questions": questions, "k": 4})
        assert resp.status_code == 200
        batches = resp.json()
        assert len(batches) == 2
        for slot, question in enumerate(questions):
            single = client.get("/search", params={"q": question, "k": 4}).json()
            assert batches[slot] == single

    def test_unanswerable_slot_is_empty_list(self, client):
        resp = client.post("/batch-search", json={"questions": ["Michael Jackson", "zz qq"]})
        assert resp.status_code == 200
        assert resp.json()[1] == []

    def test_empty_list_is_400(self, client):
        assert client.post("/batch-search", json={"questions": []}).status_code == 400

    def test_blank_slot_is_400(self, client):
        resp = client.post("/batch-search", json={"questions": ["ok", " "]})
        assert resp.status_code == 400

    def test_oversized_batch_is_400(self, client):
        resp = client.post("/batch-search", json={"questions": ["q"] * 5})
        assert resp.status_code == 400
        assert "max batch size" in resp.json()["detail"]

    def test_malformed_body_is_400(self, client):
        assert client.post("/batch-search", json={"nope": 1}).status_code == 400
        resp = client.post(
            "/batch-search", content=b"not json", headers={"content-type": "application/json"}
        )
        assert resp.status_code == 400


class TestHealthz:
    def test_metadata(self, client, searcher):
        resp = client.get("/healthz")
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "ok"
        assert body["n_vectors"] == searcher.dump.n_rows
        assert body["dim"] == 6
        assert body["quant_mode"] == "none"
        assert body["n_clusters"] == 0


class TestRequestLogging:
    def test_json_line_per_request(self, client, caplog):
        with caplog.at_level(logging.INFO, logger="phraseindex.service"):
            client.get("/search", params={"q": "Michael Jackson", "k": 2})
        payloads = [json.loads(rec.message) for rec in caplog.records if rec.message.startswith("{")]
        assert payloads
        entry = payloads[-1]
        assert entry["path"] == "/search"
        assert entry["k"] == 2
        assert entry["latency_ms"] >= 0
        assert entry["result_count"] >= 1


class TestServiceConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ServiceConfig(default_k=0)
        with pytest.raises(ValueError):
            ServiceConfig(default_k=10, max_k=5)
        with pytest.raises(ValueError):
            ServiceConfig(max_batch_size=0)

    def test_file_env_override_order(self, tmp_path, monkeypatch):
        cfg_file = tmp_path / "svc.cfg"
        cfg_file.write_text("port = 1111\nhost = filehost\ndefault_k = 3\n", encoding="utf-8")
        monkeypatch.setenv(ENV_BIND, "envhost:2222")
        monkeypatch.setenv(ENV_INDEX, "/env/index.dphi")
        cfg = load_service_config(cfg_file, {"port": 3333})
        assert cfg.host == "envhost"  # env beat the file
        assert cfg.port == 3333       # explicit override beat the env
        assert cfg.index_path == "/env/index.dphi"
        assert cfg.default_k == 3

    def test_bad_bind_rejected(self, monkeypatch):
        monkeypatch.setenv(ENV_BIND, "nocolon")
        with pytest.raises(ValueError, match="host:port"):
            load_service_config()

    def test_unknown_key_rejected(self, tmp_path):
        cfg_file = tmp_path / "svc.cfg"
        cfg_file.write_text("workers = 4\n", encoding="utf-8")
        with pytest.raises(ValueError, match="unknown"):
            load_service_config(cfg_file)


class TestLoadSearcher:
    def test_full_load(self, small_corpus, tmp_path):
        params = init_params(len(small_corpus.vocabulary), dim=6, window=2, seed=0)
        dump = build_phrase_dump(params, small_corpus)
        ivf = build_ivf(dump, n_clusters=3, seed=0)
        index_path = tmp_path / "idx.dphi"
        enc_path = tmp_path / "enc.dppm"
        save_index(dump, ivf, index_path)
        save_params(params, enc_path)
        # the corpus fixture wrote corpus.jsonl into the same tmp dir
        corpus_path = tmp_path / "corpus.jsonl"
        assert corpus_path.exists()
        searcher = load_searcher(
            ServiceConfig(
                index_path=str(index_path),
                encoder_path=str(enc_path),
                corpus_path=str(corpus_path),
            )
        )
        assert searcher.ivf.n_clusters == 3
        assert searcher.search("Michael Jackson")

    def test_missing_paths_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="missing"):
            load_searcher(ServiceConfig())
        with pytest.raises(FileNotFoundError):
            load_searcher(
                ServiceConfig(
                    index_path=str(tmp_path / "nope.dphi"),
                    encoder_path=str(tmp_path / "nope.dppm"),
                    corpus_path=str(tmp_path / "nope.jsonl"),
                )
            )
