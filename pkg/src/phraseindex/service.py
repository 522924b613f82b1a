"""Read-only HTTP search service.

Endpoints:

* GET /search?q=...&k=N       -> JSON list of result objects
* POST /batch-search          -> {"questions": [...], "k": N} -> list of lists
* GET /healthz                -> index metadata

Bad input (missing or empty question, k out of range, oversized batch)
returns 400 with a message; internal failures return 500.  Each request is
logged as one JSON line with path, k, latency and result count.  The app
only ever reads the loaded index, so concurrent requests need no locking.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .corpus import ingest_jsonl
from .encoder import load_params
from .indexing import load_index
from .search import PhraseSearcher, SearchConfig
from .training import read_kv_file

logger = logging.getLogger(__name__)

ENV_BIND = "PHRASEINDEX_BIND"
ENV_INDEX = "PHRASEINDEX_INDEX"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    index_path: str = ""
    encoder_path: str = ""
    corpus_path: str = ""
    default_k: int = 10
    max_k: int = 1000
    max_batch_size: int = 64
    timeout_s: float = 30.0

    def __post_init__(self) -> None:
        if self.default_k < 1 or self.max_k < self.default_k:
            raise ValueError("need 1 <= default_k <= max_k")
        if self.max_batch_size < 1 or self.timeout_s <= 0:
            raise ValueError("max_batch_size must be >= 1 and timeout_s positive")


_SERVICE_FIELDS = {
    "host": str,
    "port": int,
    "index_path": str,
    "encoder_path": str,
    "corpus_path": str,
    "default_k": int,
    "max_k": int,
    "max_batch_size": int,
    "timeout_s": float,
}


def load_service_config(path=None, overrides: Mapping[str, object] | None = None) -> ServiceConfig:
    """Config file, then PHRASEINDEX_* environment, then explicit overrides."""
    raw: dict[str, object] = {}
    if path is not None:
        for key, value in read_kv_file(path).items():
            if key not in _SERVICE_FIELDS:
                raise ValueError(f"{path}: unknown config key {key!r}")
            raw[key] = _SERVICE_FIELDS[key](value)
    bind = os.environ.get(ENV_BIND)
    if bind:
        host, _, port = bind.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"{ENV_BIND} must look like host:port, got {bind!r}")
        raw["host"], raw["port"] = host, int(port)
    index_env = os.environ.get(ENV_INDEX)
    if index_env:
        raw["index_path"] = index_env
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _SERVICE_FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        raw[key] = _SERVICE_FIELDS[key](value)
    return ServiceConfig(**raw)


class SearchHit(BaseModel):
    text: str
    score: float
    doc_id: str
    paragraph: int
    start_token: int
    end_token: int
    char_start: int
    char_end: int


class BatchSearchRequest(BaseModel):
    questions: list[str]
    k: int | None = None


class HealthResponse(BaseModel):
    status: str
    n_vectors: int
    dim: int
    quant_mode: str
    n_clusters: int


def load_searcher(config: ServiceConfig) -> PhraseSearcher:
    """Load corpus, index and encoder checkpoint into a ready searcher."""
    for name, value in (("index_path", config.index_path), ("encoder_path", config.encoder_path), ("corpus_path", config.corpus_path)):
        if not value:
            raise ValueError(f"service config is missing {name}")
        if not Path(value).exists():
            raise FileNotFoundError(f"{name} does not exist: {value}")
    corpus = ingest_jsonl(config.corpus_path)
    dump, ivf = load_index(config.index_path)
    dump.attach_texts(corpus)
    params = load_params(config.encoder_path)
    return PhraseSearcher(dump, ivf, params, corpus.vocabulary)


def _log_request(path: str, k: int, started: float, result_count: int) -> None:
    logger.info(
        json.dumps(
            {
                "path": path,
                "k": k,
                "latency_ms": round((time.perf_counter() - started) * 1000.0, 3),
                "result_count": result_count,
            }
        )
    )


def create_app(searcher: PhraseSearcher, config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="phraseindex", docs_url=None, redoc_url=None)

    @app.exception_handler(RequestValidationError)
    async def validation_as_400(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc.errors()[:1])})

    def resolve_k(k: int | None) -> int:
        k = config.default_k if k is None else k
        if k < 1 or k > config.max_k:
            raise HTTPException(status_code=400, detail=f"k must be in [1, {config.max_k}]")
        return k

    @app.get("/search", response_model=list[SearchHit])
    def get_search(q: str = "", k: int | None = None):
        started = time.perf_counter()
        k = resolve_k(k)
        if not q.strip():
            raise HTTPException(status_code=400, detail="missing or empty question 'q'")
        try:
            results = searcher.search(q, _result_config(searcher, k))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except Exception as exc:  # noqa: BLE001 - surface as a clean 500
            logger.exception("search failed")
            raise HTTPException(status_code=500, detail=f"internal error: {exc}")
        _log_request("/search", k, started, len(results))
        return [SearchHit(**r.to_json()) for r in results]

    @app.post("/batch-search", response_model=list[list[SearchHit]])
    def post_batch_search(body: BatchSearchRequest):
        started = time.perf_counter()
        k = resolve_k(body.k)
        if not body.questions:
            raise HTTPException(status_code=400, detail="empty question list")
        if len(body.questions) > config.max_batch_size:
            raise HTTPException(
                status_code=400,
                detail=f"batch of {len(body.questions)} exceeds max batch size {config.max_batch_size}",
            )
        for slot, question in enumerate(body.questions):
            if not question.strip():
                raise HTTPException(status_code=400, detail=f"question {slot} is empty")
        try:
            batches = searcher.batch_search(body.questions, _result_config(searcher, k))
        except Exception as exc:  # noqa: BLE001
            logger.exception("batch search failed")
            raise HTTPException(status_code=500, detail=f"internal error: {exc}")
        _log_request("/batch-search", k, started, sum(len(b) for b in batches))
        return [[SearchHit(**r.to_json()) for r in results] for results in batches]

    @app.get("/healthz", response_model=HealthResponse)
    def healthz():
        return HealthResponse(
            status="ok",
            n_vectors=searcher.dump.n_rows,
            dim=searcher.dump.dim,
            quant_mode=searcher.dump.quant_mode,
            n_clusters=0 if searcher.ivf is None else searcher.ivf.n_clusters,
        )

    return app


def _result_config(searcher: PhraseSearcher, n_results: int) -> SearchConfig:
    base = searcher.config
    return SearchConfig(
        k=max(base.k, n_results),
        max_span_len=base.max_span_len,
        n_probe=base.n_probe,
        n_results=n_results,
    )


def run_service(config: ServiceConfig) -> None:
    import uvicorn

    searcher = load_searcher(config)
    app = create_app(searcher, config)
    uvicorn.run(app, host=config.host, port=config.port, timeout_keep_alive=int(config.timeout_s))
