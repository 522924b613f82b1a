"""Command-line entry points, thin wrappers over the package functions.

Exit codes: 0 success, 1 usage error (bad flags / missing arguments),
2 runtime failure (unreadable files, bad data, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import ingest_jsonl, load_qa_jsonl
from .encoder import load_params, save_params
from .evaluation import BenchmarkResult, benchmark_qps, retrieval_accuracy
from .indexing import (
    answer_boundary_mask,
    apply_filter,
    build_ivf,
    build_phrase_dump,
    load_index,
    quantize_dump,
    save_index,
    select_filter_threshold,
    train_filter,
)
from .qsft import load_qsft_config, qsft_train
from .search import PhraseSearcher, SearchConfig
from .service import load_service_config, run_service
from .training import load_teacher_file, load_train_config, train_phrase_encoders


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; remap to 1 per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_search_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--index", required=True, help="index file")
    parser.add_argument("--encoder", required=True, help="encoder checkpoint")
    parser.add_argument("--corpus", required=True, help="corpus JSONL (texts and vocabulary)")
    parser.add_argument("--candidates", type=int, default=100, help="MIPS seeds per side")
    parser.add_argument("--max-span-len", type=int, default=20)
    parser.add_argument("--n-probe", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="phraseindex", description="dense phrase retrieval toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[], help="train span encoders")
    p.add_argument("--corpus", required=True)
    p.add_argument("--qa", required=True, action="append", help="QA JSONL (repeatable)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--teachers", help="teacher distribution file (npz)")
    for flag, typ in (
        ("--batch-size", int), ("--prebatch-c", int), ("--epochs", int), ("--warmup-epochs", int),
        ("--lr", float), ("--lambda1", float), ("--lambda2", float), ("--lambda3", float),
        ("--seed", int), ("--clip-norm", float), ("--dim", int), ("--window", int),
    ):
        p.add_argument(flag, type=typ, default=None)

    p = sub.add_parser("build-index", help="encode a corpus into an index file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quantize", choices=["none", "sq8"], default="none")
    p.add_argument("--clusters", type=int, default=0, help="IVF clusters (0 = no IVF)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("filter", help="train the token filter and rewrite the index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--index", required=True, help="input index file")
    p.add_argument("--train-qa", required=True, help="QA JSONL with gold spans")
    p.add_argument("--dev-qa", required=True, help="QA JSONL for threshold selection")
    p.add_argument("--out", required=True, help="filtered index output path")
    p.add_argument("--max-drop", type=float, default=0.01)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--filter-lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-span-len", type=int, default=20)

    p = sub.add_parser("qsft", help="fine-tune the question encoder against a frozen index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--qa", required=True)
    p.add_argument("--out", required=True, help="tuned checkpoint output path")
    p.add_argument("--config", help="key-value config file")
    for flag, typ in (
        ("--top-k", int), ("--batch-size", int), ("--epochs", int), ("--lr", float),
        ("--seed", int), ("--clip-norm", float), ("--max-span-len", int), ("--n-probe", int),
    ):
        p.add_argument(flag, type=typ, default=None)

    p = sub.add_parser("search", help="answer one question")
    _add_search_flags(p)
    p.add_argument("-q", "--question", required=True)
    p.add_argument("-k", type=int, default=10, help="results to return")

    p = sub.add_parser("eval", help="retrieval accuracy over a QA file")
    _add_search_flags(p)
    p.add_argument("--qa", required=True)
    p.add_argument("--ks", default="1,5,10", help="comma-separated accuracy cutoffs")
    p.add_argument("--json", help="also write the report as JSON to this path")

    p = sub.add_parser("bench", help="throughput benchmark")
    _add_search_flags(p)
    p.add_argument("--questions", required=True, help="QA JSONL or plain text, one question per line")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("-k", type=int, default=10)

    p = sub.add_parser("serve", help="run the HTTP search service")
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--index", dest="index_path", default=None)
    p.add_argument("--encoder", dest="encoder_path", default=None)
    p.add_argument("--corpus", dest="corpus_path", default=None)
    p.add_argument("--default-k", type=int, default=None)
    p.add_argument("--max-k", type=int, default=None)
    p.add_argument("--max-batch-size", type=int, default=None)
    p.add_argument("--timeout-s", type=float, default=None)
    return parser


def _load_searcher(args) -> PhraseSearcher:
    corpus = ingest_jsonl(args.corpus)
    dump, ivf = load_index(args.index)
    dump.attach_texts(corpus)
    params = load_params(args.encoder)
    config = SearchConfig(
        k=args.candidates,
        max_span_len=args.max_span_len,
        n_probe=args.n_probe,
    )
    return PhraseSearcher(dump, ivf, params, corpus.vocabulary, config)


def _cmd_train(args) -> int:
    overrides = {
        key: getattr(args, key)
        for key in (
            "batch_size", "prebatch_c", "epochs", "warmup_epochs", "lr",
            "lambda1", "lambda2", "lambda3", "seed", "clip_norm", "dim", "window",
        )
    }
    config = load_train_config(args.config, overrides)
    corpus = ingest_jsonl(args.corpus)
    qa = []
    for qa_path in args.qa:
        qa.extend(load_qa_jsonl(corpus, qa_path))
    teachers = load_teacher_file(args.teachers) if args.teachers else None
    params = train_phrase_encoders(corpus, qa, config, teachers=teachers)
    save_params(params, args.out)
    print(f"trained on {len(qa)} pairs; checkpoint written to {args.out}")
    return 0


def _cmd_build_index(args) -> int:
    corpus = ingest_jsonl(args.corpus)
    params = load_params(args.encoder)
    dump = build_phrase_dump(params, corpus)
    if args.quantize == "sq8":
        dump = quantize_dump(dump)
    ivf = build_ivf(dump, args.clusters, seed=args.seed) if args.clusters else None
    save_index(dump, ivf, args.out)
    print(f"indexed {dump.n_rows} token vectors (d={dump.dim}, quant={dump.quant_mode}) to {args.out}")
    return 0


def _cmd_filter(args) -> int:
    corpus = ingest_jsonl(args.corpus)
    params = load_params(args.encoder)
    dump, ivf = load_index(args.index)
    dump.attach_texts(corpus)
    train_qa = load_qa_jsonl(corpus, args.train_qa)
    dev_qa = load_qa_jsonl(corpus, args.dev_qa)
    mask = answer_boundary_mask(dump, train_qa)
    fparams = train_filter(
        dump.matrix(), mask, lr=args.filter_lr, iterations=args.iterations, seed=args.seed
    )
    fparams.threshold = select_filter_threshold(
        dump, fparams, dev_qa, params, corpus.vocabulary,
        max_accuracy_drop=args.max_drop, max_span_len=args.max_span_len,
    )
    filtered, _ = apply_filter(dump, fparams)
    new_ivf = build_ivf(filtered, min(ivf.n_clusters, filtered.n_rows), seed=args.seed) if ivf else None
    save_index(filtered, new_ivf, args.out)
    kept = filtered.n_rows / dump.n_rows
    print(
        f"threshold {fparams.threshold:.6g}: kept {filtered.n_rows}/{dump.n_rows} rows "
        f"({100 * kept:.1f}%); wrote {args.out}"
    )
    return 0


def _cmd_qsft(args) -> int:
    overrides = {
        key: getattr(args, key)
        for key in ("top_k", "batch_size", "epochs", "lr", "seed", "clip_norm", "max_span_len", "n_probe")
    }
    config = load_qsft_config(args.config, overrides)
    corpus = ingest_jsonl(args.corpus)
    params = load_params(args.encoder)
    dump, ivf = load_index(args.index)
    dump.attach_texts(corpus)
    qa = load_qa_jsonl(corpus, args.qa)
    tuned = qsft_train(dump, ivf, params, qa, config, corpus.vocabulary)
    save_params(tuned, args.out)
    print(f"fine-tuned question encoder on {len(qa)} pairs; checkpoint written to {args.out}")
    return 0


def _cmd_search(args) -> int:
    searcher = _load_searcher(args)
    cfg = SearchConfig(
        k=max(args.candidates, args.k),
        max_span_len=args.max_span_len,
        n_probe=args.n_probe,
        n_results=args.k,
    )
    for result in searcher.search(args.question, cfg):
        print(json.dumps(result.to_json()))
    return 0


def _cmd_eval(args) -> int:
    searcher = _load_searcher(args)
    corpus_qa = load_qa_jsonl(ingest_jsonl(args.corpus), args.qa)
    ks = [int(part) for part in args.ks.split(",") if part.strip()]
    report = retrieval_accuracy(searcher, corpus_qa, ks=ks)
    print(report.to_text_table())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
        print(f"json report written to {args.json}")
    return 0


def _read_questions(path: str) -> list[str]:
    questions = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("{"):
            questions.append(json.loads(line)["question"])
        else:
            questions.append(line)
    return questions


def _cmd_bench(args) -> int:
    searcher = _load_searcher(args)
    questions = _read_questions(args.questions)
    result = benchmark_qps(
        searcher,
        questions,
        batch_size=args.batch_size,
        warmup_batches=args.warmup,
        runs=args.runs,
    )
    print(BenchmarkResult.CSV_HEADER)
    print(result.to_csv_row())
    return 0


def _cmd_serve(args) -> int:
    overrides = {
        key: getattr(args, key)
        for key in (
            "host", "port", "index_path", "encoder_path", "corpus_path",
            "default_k", "max_k", "max_batch_size", "timeout_s",
        )
    }
    config = load_service_config(args.config, overrides)
    run_service(config)
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "build-index": _cmd_build_index,
    "filter": _cmd_filter,
    "qsft": _cmd_qsft,
    "search": _cmd_search,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _HANDLERS[args.command](args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
