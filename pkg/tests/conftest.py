import json

import numpy as np
import pytest

from phraseindex.corpus import Corpus, ingest_jsonl, load_qa_jsonl


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


WALES_TEXT = (
    "Prince George of Wales is the elder son of William , Prince of Wales .\n\n"
    "George is second in line to the British throne after his father ."
)


@pytest.fixture()
def small_corpus(tmp_path) -> Corpus:
    """Two tiny documents; the first one's text splits into two paragraphs."""
    lines = [
        {"id": "wales", "title": "Prince George", "paragraphs": [{"text": WALES_TEXT}]},
        {
            "id": "jackson",
            "title": "Michael Jackson",
            "paragraphs": [
                {"text": "Michael Jackson was an American singer ."},
                {"text": "He recorded the album Thriller in 1982 ."},
            ],
        },
    ]
    path = tmp_path / "corpus.jsonl"
    path.write_text("\n".join(json.dumps(l) for l in lines) + "\n", encoding="utf-8")
    return ingest_jsonl(path)


def write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return path


def make_random_dump(rng, max_rows=60, max_dim=16, quantized=False):
    """A structurally valid PhraseDump with random vectors and paragraphs.

    Token positions may have gaps, as they would after filtering.
    """
    from phraseindex.indexing import PhraseDump, quantize_dump

    d = int(rng.integers(2, max_dim + 1))
    n_docs = int(rng.integers(1, 4))
    doc_ids = [f"doc{i}" for i in range(n_docs)]
    doc_ord, par_idx, token_pos, char_start, char_end = [], [], [], [], []
    total = 0
    for ord_ in range(n_docs):
        for p in range(int(rng.integers(1, 4))):
            m = int(rng.integers(1, max(2, max_rows // (n_docs * 3)) + 1))
            positions = np.sort(rng.choice(3 * m, size=m, replace=False)).astype(np.uint32)
            doc_ord.extend([ord_] * m)
            par_idx.extend([p] * m)
            token_pos.extend(positions.tolist())
            starts = np.cumsum(rng.integers(1, 6, size=m)).astype(np.uint32)
            char_start.extend(starts.tolist())
            char_end.extend((starts + rng.integers(1, 5, size=m).astype(np.uint32)).tolist())
            total += m
    vectors = rng.normal(size=(total, d)).astype(np.float32)
    dump = PhraseDump(
        dim=d,
        quant_mode="none",
        vectors=vectors,
        codes=None,
        scales=np.ones(total, dtype=np.float32),
        doc_ids=doc_ids,
        doc_ord=np.array(doc_ord, dtype=np.uint32),
        par_idx=np.array(par_idx, dtype=np.uint32),
        token_pos=np.array(token_pos, dtype=np.uint32),
        char_start=np.array(char_start, dtype=np.uint32),
        char_end=np.array(char_end, dtype=np.uint32),
    )
    return quantize_dump(dump) if quantized else dump
