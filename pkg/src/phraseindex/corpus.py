"""Corpus ingestion and text primitives.

A corpus is a list of documents, each holding the paragraphs obtained by
splitting the raw passage texts on blank lines.  Tokenization is deterministic:
split on whitespace, punctuation characters become single-character tokens,
token strings are lowercased while character spans keep pointing into the
original text.  The vocabulary is built incrementally during ingestion in
insertion order, so re-ingesting the same file reproduces the same ids.
"""
from __future__ import annotations

import json
import re
import string
import unicodedata
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_BLANK_LINE_RE = re.compile(r"\n\s*\n")
_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_CHARS = set(string.punctuation)


class IngestError(ValueError):
    """Malformed corpus or QA input."""


def tokenize(text: str) -> list[tuple[str, int, int]]:
    """Split ``text`` into (token, char_start, char_end) triples.

    Whitespace separates tokens, every punctuation character is its own
    token, and token strings are lowercased.  Character offsets are
    end-exclusive and index the original (uncased) string.
    """
    tokens: list[tuple[str, int, int]] = []
    start = -1
    for i, ch in enumerate(text):
        if ch.isspace():
            if start >= 0:
                tokens.append((text[start:i].lower(), start, i))
                start = -1
        elif unicodedata.category(ch).startswith("P"):
            if start >= 0:
                tokens.append((text[start:i].lower(), start, i))
                start = -1
            tokens.append((ch, i, i + 1))
        elif start < 0:
            start = i
    if start >= 0:
        tokens.append((text[start:].lower(), start, len(text)))
    return tokens


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT_CHARS)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


@dataclass
class Paragraph:
    """One paragraph: raw text plus its token table."""

    text: str
    token_ids: np.ndarray
    char_starts: np.ndarray
    char_ends: np.ndarray

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def tokens(self) -> list[tuple[int, int, int]]:
        """(token_id, char_start, char_end) triples."""
        return list(
            zip(
                self.token_ids.tolist(),
                self.char_starts.tolist(),
                self.char_ends.tolist(),
            )
        )

    def span_text(self, start: int, end: int) -> str:
        """Surface form of the inclusive token span [start, end]."""
        if not 0 <= start <= end < len(self):
            raise ValueError(f"span ({start}, {end}) out of range for {len(self)} tokens")
        return self.text[int(self.char_starts[start]) : int(self.char_ends[end])]


@dataclass
class Document:
    doc_id: str
    title: str
    paragraphs: list[Paragraph]


@dataclass
class Corpus:
    documents: list[Document]
    vocabulary: dict[str, int]
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.id_to_token:
            self.id_to_token = [""] * len(self.vocabulary)
            for tok, idx in self.vocabulary.items():
                self.id_to_token[idx] = tok
        self._by_id = {doc.doc_id: doc for doc in self.documents}

    def document(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise KeyError(f"unknown document id {doc_id!r}") from None

    def paragraph(self, doc_id: str, par_idx: int) -> Paragraph:
        doc = self.document(doc_id)
        if not 0 <= par_idx < len(doc.paragraphs):
            raise IndexError(f"document {doc_id!r} has no paragraph {par_idx}")
        return doc.paragraphs[par_idx]

    def total_tokens(self) -> int:
        return sum(len(p) for d in self.documents for p in d.paragraphs)

    def iter_paragraphs(self):
        """Yield (doc_id, paragraph_index, paragraph) in corpus order."""
        for doc in self.documents:
            for idx, par in enumerate(doc.paragraphs):
                yield doc.doc_id, idx, par


@dataclass(frozen=True)
class PhraseSpan:
    """An inclusive token span inside one paragraph."""

    doc_id: str
    paragraph: int
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid span ({self.start}, {self.end})")

    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class QAPair:
    question: str
    answer: str
    gold_span: PhraseSpan | None = None
    source: str = "annotated"

    def __post_init__(self) -> None:
        if self.source not in ("annotated", "augmented"):
            raise ValueError(f"unknown QA source {self.source!r}")


def _segment(text: str) -> list[str]:
    return [part.strip() for part in _BLANK_LINE_RE.split(text) if part.strip()]


def _build_paragraph(text: str, vocabulary: dict[str, int]) -> Paragraph:
    triples = tokenize(text)
    ids = np.empty(len(triples), dtype=np.int32)
    starts = np.empty(len(triples), dtype=np.int32)
    ends = np.empty(len(triples), dtype=np.int32)
    for k, (tok, cs, ce) in enumerate(triples):
        if tok not in vocabulary:
            vocabulary[tok] = len(vocabulary)
        ids[k] = vocabulary[tok]
        starts[k] = cs
        ends[k] = ce
    return Paragraph(text=text, token_ids=ids, char_starts=starts, char_ends=ends)


def ingest_jsonl(path: str | Path) -> Corpus:
    """Read a corpus JSONL file: one document object per line.

    Each line is {"id": str, "title": str, "paragraphs": [{"text": str}, ...]}.
    Paragraph texts are further split on blank lines; empty segments are
    dropped.  Duplicate document ids and documents with no non-empty
    paragraphs are ingestion errors.
    """
    vocabulary: dict[str, int] = {}
    documents: list[Document] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}: line {lineno}: invalid JSON ({exc})") from None
            try:
                doc_id = record["id"]
                raw_pars = record["paragraphs"]
            except (KeyError, TypeError):
                raise IngestError(f"{path}: line {lineno}: missing 'id' or 'paragraphs'") from None
            if doc_id in seen:
                raise IngestError(f"{path}: line {lineno}: duplicate document id {doc_id!r}")
            seen.add(doc_id)
            paragraphs = []
            for entry in raw_pars:
                for segment in _segment(entry["text"]):
                    paragraphs.append(_build_paragraph(segment, vocabulary))
            if not paragraphs:
                raise IngestError(f"{path}: line {lineno}: document {doc_id!r} has no non-empty paragraphs")
            documents.append(Document(doc_id=doc_id, title=record.get("title", ""), paragraphs=paragraphs))
    return Corpus(documents=documents, vocabulary=vocabulary)


def enumerate_phrases(
    paragraph: Paragraph,
    max_len: int,
    *,
    doc_id: str = "",
    paragraph_index: int = 0,
) -> list[PhraseSpan]:
    """All token spans of length at most ``max_len``, in (start, end) order."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    m = len(paragraph)
    spans = []
    for i in range(m):
        for j in range(i, min(i + max_len, m)):
            spans.append(PhraseSpan(doc_id=doc_id, paragraph=paragraph_index, start=i, end=j))
    return spans


def question_token_ids(corpus: Corpus, question: str) -> list[int]:
    """Map a question to vocabulary ids, silently dropping unknown tokens."""
    vocab = corpus.vocabulary
    return [vocab[tok] for tok, _, _ in tokenize(question) if tok in vocab]


def _char_span_to_tokens(par: Paragraph, char_start: int, char_end: int) -> tuple[int, int]:
    starts = par.char_starts
    ends = par.char_ends
    if char_start < 0 or char_end <= char_start or char_end > len(par.text):
        raise ValueError(f"char span ({char_start}, {char_end}) out of range")
    st = bisect_right(starts.tolist(), char_start) - 1
    if st < 0 or char_start >= ends[st]:
        raise ValueError(f"char offset {char_start} does not fall inside a token")
    et = bisect_right(starts.tolist(), char_end - 1) - 1
    if et < 0 or char_end - 1 >= ends[et]:
        raise ValueError(f"char offset {char_end} does not fall inside a token")
    return st, et


def load_qa_jsonl(corpus: Corpus, path: str | Path) -> list[QAPair]:
    """Read QA pairs, mapping gold character offsets onto token spans.

    Gold position fields (doc_id, par_idx, char_start, char_end) are optional
    as a group; when present the induced token span must normalize to the
    answer string.
    """
    pairs: list[QAPair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}: line {lineno}: invalid JSON ({exc})") from None
            try:
                question = record["question"]
                answer = record["answer"]
            except (KeyError, TypeError):
                raise IngestError(f"{path}: line {lineno}: missing 'question' or 'answer'") from None
            source = record.get("source", "annotated")
            gold = None
            gold_fields = [record.get(k) for k in ("doc_id", "par_idx", "char_start", "char_end")]
            if any(v is not None for v in gold_fields):
                if any(v is None for v in gold_fields):
                    raise IngestError(f"{path}: line {lineno}: incomplete gold position fields")
                doc_id, par_idx, cs, ce = gold_fields
                try:
                    par = corpus.paragraph(doc_id, int(par_idx))
                    st, et = _char_span_to_tokens(par, int(cs), int(ce))
                except (KeyError, IndexError, ValueError) as exc:
                    raise IngestError(f"{path}: line {lineno}: bad gold position ({exc})") from None
                if normalize_answer(par.span_text(st, et)) != normalize_answer(answer):
                    raise IngestError(
                        f"{path}: line {lineno}: gold span text {par.span_text(st, et)!r} "
                        f"does not normalize to answer {answer!r}"
                    )
                gold = PhraseSpan(doc_id=doc_id, paragraph=int(par_idx), start=st, end=et)
            try:
                pairs.append(QAPair(question=question, answer=answer, gold_span=gold, source=source))
            except ValueError as exc:
                raise IngestError(f"{path}: line {lineno}: {exc}") from None
    return pairs
