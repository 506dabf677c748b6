"""factweave: lookup-call markup, triplet store, fuzzy/trie retrieval,
interleaved generation, and perplexity accounting."""

from .accounting import (
    DeltaLossRecord,
    EmptyOriginal,
    ScoredSequence,
    ScoredToken,
    UnknownOccurrenceId,
    corrector_filter,
    make_scored_sequence,
    nll,
    post_lookup_window,
    ppl_normalized,
    ppl_over_original,
    rank_offload,
    read_delta_jsonl,
    read_scored_jsonl,
    revert_annotations,
    write_scored_jsonl,
)
from .harness import (
    GenerationConfig,
    LookupOutcome,
    ProviderFailure,
    ScriptedLm,
    ScriptExhausted,
    forced_lookup_generate,
    generate,
    load_scripted_lm,
    scripted_lm,
)
from .markup import (
    DB_END,
    DB_RETRIEVE,
    DB_START,
    SEP,
    SPECIAL_TOKENS,
    AnnotatedDocument,
    LookupCall,
    MalformedAnnotation,
    Token,
    TokenCategory,
    Triplet,
    TruncatedCallWarning,
    build_document,
    compute_loss_mask,
    convert_inline_to_tokenform,
    detokenize,
    extract_triplets,
    normalize_text,
    parse_document,
    parse_inline,
    parse_tokenform,
    read_corpus,
    serialize,
    strip_annotations,
    tokenize,
    write_corpus,
)
from .retrieval import (
    DEFAULT_THRESHOLD,
    CosineIndex,
    EmbeddingProvider,
    RetrievalResult,
    TrigramEmbeddingProvider,
    UnembeddableText,
    build_index,
    render_query,
    retrieve,
)
from .store import CorruptSnapshot, StoreKey, StoreStats, TripletStore
from .trie import (
    END_OF_QUERY,
    DeadEnd,
    EmptyTrie,
    QueryTrie,
    build_trie,
    constrained_walk,
)

__version__ = "0.1.0"
