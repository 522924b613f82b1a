"""Synthetic slot-filling corpora for tests, calibration and demos.

Each paragraph states a couple of facts about one unique subject:

    filler7 subj41 rel1 ans41a . subj41 rel2 ans41b . filler3

Questions name the subject and a relation ("subj41 rel1" -> "ans41a").
Every answer token is globally unique, so top-1 exact match can only be
earned by retrieving the right span of the right paragraph.  Each document
also carries a glossary paragraph with alternate relation surface forms
("about1", "about2", ...) so those words are in-vocabulary but untrained as
question tokens; questions phrased with them exercise adapting the question
encoder against a frozen index.
"""
from __future__ import annotations

import argparse
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class SynthTask:
    corpus_lines: list[str]
    train_qa_lines: list[str]       # primary-style questions, one per fact
    dev_qa_lines: list[str]         # primary-style, held-out subset
    alt_qa_lines: list[str]         # alternate-relation phrasing of every fact
    n_paragraphs: int
    n_questions: int

    def write(self, directory: str | Path) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "corpus": directory / "corpus.jsonl",
            "train_qa": directory / "train_qa.jsonl",
            "dev_qa": directory / "dev_qa.jsonl",
            "alt_qa": directory / "alt_qa.jsonl",
        }
        paths["corpus"].write_text("\n".join(self.corpus_lines) + "\n", encoding="utf-8")
        paths["train_qa"].write_text("\n".join(self.train_qa_lines) + "\n", encoding="utf-8")
        paths["dev_qa"].write_text("\n".join(self.dev_qa_lines) + "\n", encoding="utf-8")
        paths["alt_qa"].write_text("\n".join(self.alt_qa_lines) + "\n", encoding="utf-8")
        return paths


def _join_with_offsets(tokens: list[str]) -> tuple[str, list[tuple[int, int]]]:
    text_parts = []
    offsets = []
    cursor = 0
    for tok in tokens:
        if text_parts:
            cursor += 1  # the joining space
        text_parts.append(tok)
        offsets.append((cursor, cursor + len(tok)))
        cursor += len(tok)
    return " ".join(text_parts), offsets


def make_task(
    seed: int = 0,
    n_paragraphs: int = 250,
    facts_per_paragraph: int = 2,
    n_relations: int = 2,
    paragraphs_per_doc: int = 10,
    n_fillers: int = 30,
    dev_fraction: float = 0.2,
) -> SynthTask:
    """Generate a task; dev questions are a disjoint slice of the fact list."""
    if facts_per_paragraph > n_relations:
        raise ValueError("need at least as many relations as facts per paragraph")
    rng = np.random.default_rng(seed)
    fillers = [f"filler{i}" for i in range(n_fillers)]
    corpus_lines = []
    facts = []  # (doc_id, par_idx, subject, relation, answer, char span)

    doc_id = ""
    doc_pars: list[dict] = []
    for k in range(n_paragraphs):
        if k % paragraphs_per_doc == 0:
            if doc_pars:
                corpus_lines.append(json.dumps({"id": doc_id, "title": doc_id, "paragraphs": doc_pars}))
            doc_id = f"doc{k // paragraphs_per_doc}"
            doc_pars = []
        relations = rng.permutation(n_relations)[:facts_per_paragraph]
        tokens = [str(rng.choice(fillers))]
        token_facts = []
        for f, rel in enumerate(relations):
            answer = f"ans{k}{'abcdefgh'[f]}"
            tokens += [f"subj{k}", f"rel{rel}", answer, "."]
            token_facts.append((len(tokens) - 2, int(rel), answer))
        tokens.append(str(rng.choice(fillers)))
        text, offsets = _join_with_offsets(tokens)
        par_idx = len(doc_pars)
        doc_pars.append({"text": text})
        for tok_pos, rel, answer in token_facts:
            facts.append(
                {
                    "doc_id": doc_id,
                    "par_idx": par_idx,
                    "subject": f"subj{k}",
                    "relation": rel,
                    "answer": answer,
                    "char_start": offsets[tok_pos][0],
                    "char_end": offsets[tok_pos][1],
                }
            )
    if doc_pars:
        corpus_lines.append(json.dumps({"id": doc_id, "title": doc_id, "paragraphs": doc_pars}))
    # glossary document keeps the alternate relation words in-vocabulary
    glossary = " ".join(f"about{r}" for r in range(n_relations))
    corpus_lines.append(json.dumps({"id": "glossary", "title": "glossary", "paragraphs": [{"text": glossary}]}))

    def qa_line(fact: dict, relation_word: str) -> str:
        return json.dumps(
            {
                "question": f"{fact['subject']} {relation_word}",
                "answer": fact["answer"],
                "doc_id": fact["doc_id"],
                "par_idx": fact["par_idx"],
                "char_start": fact["char_start"],
                "char_end": fact["char_end"],
                "source": "annotated",
            }
        )

    train_lines = [qa_line(f, f"rel{f['relation']}") for f in facts]
    alt_lines = [qa_line(f, f"about{f['relation']}") for f in facts]
    n_dev = max(1, int(len(facts) * dev_fraction))
    dev_idx = rng.permutation(len(facts))[:n_dev]
    dev_lines = [train_lines[i] for i in sorted(dev_idx)]
    return SynthTask(
        corpus_lines=corpus_lines,
        train_qa_lines=train_lines,
        dev_qa_lines=dev_lines,
        alt_qa_lines=alt_lines,
        n_paragraphs=n_paragraphs + 1,
        n_questions=len(train_lines),
    )


def gold_peaked_teacher(m: int, gold: int, peak: float = 4.0, temperature: float = 1.0) -> np.ndarray:
    """Softmax of a score vector that is zero except ``peak`` at the gold index."""
    if not 0 <= gold < m:
        raise ValueError("gold index out of range")
    scores = np.zeros(m)
    scores[gold] = peak
    scores = scores / temperature
    expd = np.exp(scores - scores.max())
    return expd / expd.sum()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="generate a synthetic slot-filling dataset")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--paragraphs", type=int, default=250)
    args = parser.parse_args(argv)
    task = make_task(seed=args.seed, n_paragraphs=args.paragraphs)
    paths = task.write(args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
