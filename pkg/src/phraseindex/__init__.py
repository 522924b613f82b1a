"""Dense phrase retrieval: encode every token span of a corpus once, then
answer questions with two maximum-inner-product searches and a constrained
span completion."""

__version__ = "0.1.0"

from .corpus import (
    Corpus,
    Document,
    Paragraph,
    PhraseSpan,
    QAPair,
    enumerate_phrases,
    ingest_jsonl,
    load_qa_jsonl,
    normalize_answer,
    tokenize,
)
from .encoder import (
    EncoderParams,
    QuestionEmbedding,
    encode_passage,
    encode_question,
    init_params,
    load_params,
    phrase_representation,
    save_params,
)
from .evaluation import benchmark_qps, exact_match, retrieval_accuracy, token_f1
from .indexing import (
    FilterParams,
    IvfIndex,
    PhraseDump,
    apply_filter,
    build_ivf,
    build_phrase_dump,
    dequantize_sq8,
    load_index,
    quantize_dump,
    quantize_sq8,
    save_index,
    select_filter_threshold,
    train_filter,
)
from .qsft import QsftConfig, qsft_loss, qsft_train
from .search import PhraseSearcher, SearchConfig, SearchResult, constrained_search, dedup, mips_topk
from .training import (
    PrebatchQueue,
    TrainConfig,
    batch_negative_loss,
    distill_loss,
    single_passage_loss,
    total_loss,
    train_phrase_encoders,
)
