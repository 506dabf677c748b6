"""Interleaved generation: free text until a lookup trigger, then query
assembly, retrieval, and value splicing.

The harness drives any :class:`LmProvider` (a deterministic mapping
from a token context to log-probability scores) through a four-phase
state machine: Free -> InEntity -> InRelation -> AwaitValue.  Query
arguments are produced either freely and resolved by fuzzy retrieval,
or by a constrained trie walk that can only spell keys present in the
store.  Retrieved values (or the fallback text on a miss) are spliced
into the output verbatim together with the closing delimiter.

Selection is greedy.  Scores are adjusted for selection only: the
repetition penalty applies in every phase, the special-token logit
bias in the Free phase only, and per-phase masking removes delimiter
choices that would produce a malformed call (for example a ``<|sep|>``
before any entity token).  Recorded log-probs are always the raw
provider scores, never the adjusted ones.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from .accounting import ScoredSequence, ScoredToken
from .markup import (
    DB_END,
    DB_RETRIEVE,
    DB_START,
    MASKED_CATEGORIES,
    SEP,
    SPECIAL_TOKENS,
    AnnotatedDocument,
    LookupCall,
    Token,
    TokenCategory,
    TruncatedCallWarning,
    detokenize,
    normalize_text,
    tokenize,
)
from .retrieval import CosineIndex
from .store import StoreKey, TripletStore
from .trie import END_OF_QUERY, QueryTrie, constrained_walk

DEFAULT_LOGIT_BIAS = {DB_START: 5.0, SEP: 2.0, DB_RETRIEVE: 2.0, DB_END: 2.0}


class ProviderFailure(RuntimeError):
    """The language-model provider violated its contract."""


class ScriptExhausted(Exception):
    """A scripted provider ran past its script; treated as end-of-text."""


class _CallAborted(Exception):
    """Internal: provider or token budget ended mid-call."""


class LmProvider(Protocol):
    def next_scores(self, context: Sequence[str]) -> Mapping[str, float] | None:
        """Log-prob scores for the next token, or None at end-of-text."""
        ...


@dataclass
class GenerationConfig:
    max_tokens: int = 256
    selection: str = "greedy"
    repetition_penalty: float = 1.2
    logit_bias: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_LOGIT_BIAS)
    )
    query_mode: str = "fuzzy"  # "fuzzy" | "trie"
    retrieval_threshold: float = 0.6
    fallback_text: str = "unknown"
    arg_token_budget: int = 16

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if not -1.0 <= self.retrieval_threshold <= 1.0:
            raise ValueError("retrieval_threshold must lie in [-1, 1]")
        if self.selection != "greedy":
            raise ValueError("only greedy selection is supported")
        if self.query_mode not in ("fuzzy", "trie"):
            raise ValueError("query_mode must be 'fuzzy' or 'trie'")


@dataclass(frozen=True)
class LookupOutcome:
    call_index: int
    entity: str
    relation: str
    success: bool
    value: str  # retrieved value, or the fallback text on failure
    similarity: float | None = None
    matched_key: StoreKey | None = None


class ScriptedLm:
    """Deterministic test double replaying a fixed token script.

    The script mirrors the full expected context after the prompt,
    spliced spans included, so the script position is simply the
    context length minus the prompt length (bound on the first call).
    The scripted token gets probability mass 1 - eps; the remaining eps
    spreads uniformly over the rest of the vocabulary (eps = 2**-20).
    """

    def __init__(self, script: Sequence[str], vocab: Sequence[str] = ()):
        self.script = list(script)
        tokens: dict[str, None] = {}
        for tok in list(vocab) + self.script + list(SPECIAL_TOKENS):
            tokens[tok] = None
        self.vocab = list(tokens)
        if len(self.vocab) < 2:
            raise ValueError("vocabulary needs at least two tokens")
        self.eps = 2.0**-20
        self.top_logprob = math.log(1.0 - self.eps)
        self.floor_logprob = math.log(self.eps / (len(self.vocab) - 1))
        self._prompt_len: int | None = None

    def next_scores(self, context: Sequence[str]) -> Mapping[str, float]:
        if self._prompt_len is None:
            self._prompt_len = len(context)
        pos = len(context) - self._prompt_len
        if pos < 0:
            raise ProviderFailure("context shrank below the bound prompt")
        if pos >= len(self.script):
            raise ScriptExhausted(pos)
        scores = dict.fromkeys(self.vocab, self.floor_logprob)
        scores[self.script[pos]] = self.top_logprob
        return scores


def scripted_lm(script: Sequence[str], vocab: Sequence[str] = ()) -> ScriptedLm:
    return ScriptedLm(script, vocab)


def load_scripted_lm(path) -> ScriptedLm:
    """Load {"vocab": [...], "script": [...]} from a JSON file."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return ScriptedLm(data.get("script", []), data.get("vocab", []))


@dataclass
class _Emitted:
    surface: str
    category: TokenCategory
    logprob: float
    spliced: bool = False


class _Session:
    """Shared machinery between free generation and forced lookups."""

    def __init__(
        self,
        lm: LmProvider,
        prompt_surfaces: list[str],
        store: TripletStore,
        index: CosineIndex | None,
        trie: QueryTrie | None,
        config: GenerationConfig,
    ):
        self.lm = lm
        self.context: list[str] = list(prompt_surfaces)
        self.store = store
        self.index = index
        self.trie = trie
        self.config = config
        self.emitted: list[_Emitted] = []
        self.outcomes: list[LookupOutcome] = []

    # -- provider access ------------------------------------------------

    def raw_scores(self) -> Mapping[str, float] | None:
        try:
            scores = self.lm.next_scores(self.context)
        except ScriptExhausted:
            return None
        if scores is None:
            return None
        if not scores:
            raise ProviderFailure("provider returned an empty distribution")
        for value in scores.values():
            if not math.isfinite(value):
                raise ProviderFailure("provider returned a non-finite score")
        return scores

    def adjusted(self, scores: Mapping[str, float], bias: bool) -> dict[str, float]:
        adjusted = dict(scores)
        penalty = self.config.repetition_penalty
        if penalty != 1.0:
            for tok in set(self.context):
                if tok in adjusted:
                    v = adjusted[tok]
                    adjusted[tok] = v / penalty if v > 0 else v * penalty
        if bias:
            for tok, b in self.config.logit_bias.items():
                if tok in adjusted:
                    adjusted[tok] = adjusted[tok] + b
        return adjusted

    @staticmethod
    def pick(candidates: Mapping[str, float]) -> str:
        best = max(candidates.values())
        return min(tok for tok, v in candidates.items() if v == best)

    def append(self, surface: str, category: TokenCategory, logprob: float, spliced: bool = False):
        self.emitted.append(_Emitted(surface, category, logprob, spliced))
        self.context.append(surface)

    def record_forced(self, surface: str, category: TokenCategory, spliced: bool = False):
        """Append a token the harness chose; log-prob read from the provider."""
        scores = self.raw_scores()
        if scores is None:
            logprob = 0.0  # provider ended; token is inserted mechanically
        else:
            logprob = scores.get(surface, min(scores.values()))
        self.append(surface, category, logprob, spliced)

    # -- lookup execution ------------------------------------------------

    def run_free_call(self) -> bool:
        """After <|db_start|> was emitted: query args, retrieval, splice.

        Returns False when the provider ended mid-call (the partial call
        is truncated away by the caller).
        """
        if self.config.query_mode == "trie":
            return self._run_trie_call()
        if self.index is None:
            raise ValueError("fuzzy query mode requires a cosine index")
        try:
            entity = self._collect_argument(SEP, TokenCategory.ENTITY)
            relation = self._collect_argument(DB_RETRIEVE, TokenCategory.RELATION)
        except _CallAborted:
            return False
        key = StoreKey(
            normalize_text(detokenize(entity)), normalize_text(detokenize(relation))
        )
        result = self.index.retrieve(key, self.config.retrieval_threshold)
        self._splice_result(
            key,
            result.value if result.is_hit else None,
            result.similarity,
            result.matched_key,
        )
        return True

    def _collect_argument(self, closer: str, category: TokenCategory) -> list[str]:
        collected: list[str] = []
        while True:
            if len(self.emitted) >= self.config.max_tokens:
                raise _CallAborted()
            scores = self.raw_scores()
            if scores is None:
                raise _CallAborted()
            if len(collected) >= self.config.arg_token_budget:
                choice = closer  # budget exhausted: force the transition
            else:
                candidates = self.adjusted(scores, bias=False)
                for special in SPECIAL_TOKENS:
                    if special != closer:
                        candidates.pop(special, None)
                if not collected:
                    candidates.pop(closer, None)  # argument must be non-empty
                if not candidates:
                    raise ProviderFailure("no selectable token for query argument")
                choice = self.pick(candidates)
            logprob = scores.get(choice, min(scores.values()))
            if choice == closer:
                closer_category = (
                    TokenCategory.SEP if closer == SEP else TokenCategory.DB_RETRIEVE
                )
                self.append(choice, closer_category, logprob)
                return collected
            self.append(choice, category, logprob)
            collected.append(choice)

    def _run_trie_call(self) -> bool:
        if self.trie is None:
            raise ValueError("trie query mode requires a query trie")
        state = {"seen_sep": False}

        def scorer(options: tuple[str, ...], may_terminate: bool) -> str:
            if len(self.emitted) >= self.config.max_tokens:
                raise _CallAborted()
            scores = self.raw_scores()
            if scores is None:
                raise _CallAborted()
            raw_floor = min(scores.values())
            adjusted = self.adjusted(scores, bias=False)
            adj_floor = min(adjusted.values())
            candidates = {tok: adjusted.get(tok, adj_floor) for tok in options}
            if may_terminate:
                candidates[END_OF_QUERY] = adjusted.get(DB_RETRIEVE, adj_floor)
            choice = self.pick(candidates)
            if choice != END_OF_QUERY:
                logprob = scores.get(choice, raw_floor)
                if choice == SEP:
                    self.append(choice, TokenCategory.SEP, logprob)
                    state["seen_sep"] = True
                else:
                    category = (
                        TokenCategory.RELATION
                        if state["seen_sep"]
                        else TokenCategory.ENTITY
                    )
                    self.append(choice, category, logprob)
            return choice

        try:
            key, _path = constrained_walk(self.trie, scorer)
        except _CallAborted:
            return False
        self.record_forced(DB_RETRIEVE, TokenCategory.DB_RETRIEVE)
        value = self.store.lookup_exact(key)
        # walk paths always spell stored keys, so the lookup cannot miss
        self._splice_result(key, value, 1.0, key)
        return True

    def _splice_result(
        self,
        key: StoreKey,
        value: str | None,
        similarity: float | None,
        matched_key: StoreKey | None,
    ) -> None:
        success = value is not None
        spliced_text = value if success else self.config.fallback_text
        for surface in tokenize(spliced_text):
            self.record_forced(surface, TokenCategory.VALUE, spliced=True)
        self.record_forced(DB_END, TokenCategory.DB_END, spliced=True)
        self.outcomes.append(
            LookupOutcome(
                call_index=len(self.outcomes),
                entity=key.entity,
                relation=key.relation,
                success=success,
                value=spliced_text,
                similarity=None if similarity == float("-inf") else similarity,
                matched_key=matched_key if success else None,
            )
        )

    # -- output assembly --------------------------------------------------

    def truncate_partial_call(self) -> None:
        """Drop a trailing unterminated call block from the output."""
        start = None
        for i, e in enumerate(self.emitted):
            if e.category is TokenCategory.DB_START:
                start = i
            elif e.category is TokenCategory.DB_END:
                start = None
        if start is not None:
            del self.emitted[start:]
            warnings.warn(
                "dropped call truncated by end of generation", TruncatedCallWarning
            )

    def document(self) -> AnnotatedDocument:
        tokens = tuple(
            Token(surface=e.surface, category=e.category, index=i)
            for i, e in enumerate(self.emitted)
        )
        calls = []
        open_call: dict | None = None
        for t in tokens:
            if t.category is TokenCategory.DB_START:
                open_call = {"start": t.index, "entity": [], "relation": [], "value": []}
            elif open_call is None:
                continue
            elif t.category is TokenCategory.ENTITY:
                open_call["entity"].append(t.surface)
            elif t.category is TokenCategory.RELATION:
                open_call["relation"].append(t.surface)
            elif t.category is TokenCategory.VALUE:
                open_call["value"].append(t.surface)
            elif t.category is TokenCategory.DB_END:
                anchor = len(tokens)
                for rest in tokens[t.index + 1 :]:
                    if rest.category is TokenCategory.ORIGINAL:
                        anchor = rest.index
                        break
                calls.append(
                    LookupCall(
                        entity=normalize_text(detokenize(open_call["entity"])),
                        relation=normalize_text(detokenize(open_call["relation"])),
                        value=detokenize(open_call["value"]),
                        span=(open_call["start"], t.index),
                        anchor=anchor,
                    )
                )
                open_call = None
        return AnnotatedDocument(tokens=tokens, calls=tuple(calls))

    def scored_sequence(self, mode: str) -> ScoredSequence:
        doc_tokens = self.document().tokens
        scored = tuple(
            ScoredToken(
                token=doc_tokens[i],
                logprob=e.logprob,
                mask=0 if e.category in MASKED_CATEGORIES else 1,
                spliced=e.spliced,
            )
            for i, e in enumerate(self.emitted)
        )
        return ScoredSequence(tokens=scored, mode=mode)


def generate(
    lm: LmProvider,
    prompt: str,
    *,
    store: TripletStore,
    index: CosineIndex | None = None,
    trie: QueryTrie | None = None,
    config: GenerationConfig | None = None,
) -> tuple[AnnotatedDocument, ScoredSequence, list[LookupOutcome]]:
    """Generate a continuation of the prompt, executing lookups live.

    The returned document and scores cover the continuation only; the
    prompt is context.  Documents are well-formed by construction
    except when the token budget cuts a call short, in which case the
    partial call is dropped, mirroring lenient parsing.
    """
    config = config or GenerationConfig()
    session = _Session(lm, tokenize(prompt), store, index, trie, config)

    while len(session.emitted) < config.max_tokens:
        scores = session.raw_scores()
        if scores is None:
            break
        candidates = session.adjusted(scores, bias=True)
        for special in (SEP, DB_RETRIEVE, DB_END):
            candidates.pop(special, None)  # malformed outside a call
        if config.query_mode == "trie" and (
            session.trie is None or session.trie.terminal_count == 0
        ):
            candidates.pop(DB_START, None)
        if not candidates:
            raise ProviderFailure("no selectable token in free phase")
        choice = session.pick(candidates)
        logprob = scores.get(choice, min(scores.values()))
        if choice == DB_START:
            session.append(choice, TokenCategory.DB_START, logprob)
            if not session.run_free_call():
                session.truncate_partial_call()
                break
        else:
            session.append(choice, TokenCategory.ORIGINAL, logprob)

    session.truncate_partial_call()
    doc = session.document()
    return doc, session.scored_sequence("dynamic"), session.outcomes


def forced_lookup_generate(
    lm: LmProvider,
    prompt: str,
    positions: set[int],
    reference: AnnotatedDocument,
    *,
    store: TripletStore,
    index: CosineIndex | None = None,
    trie: QueryTrie | None = None,
    config: GenerationConfig | None = None,
) -> tuple[ScoredSequence, list[LookupOutcome]]:
    """Teacher-force the reference, regenerating lookups at given anchors.

    ``positions`` selects reference calls by their anchor index.  A
    selected call's block is replaced by a live one: the model writes
    the query arguments itself, retrieval runs, and the outcome is
    spliced before teacher forcing resumes.  Unselected reference
    tokens (calls included) are forced verbatim and scored, so an empty
    ``positions`` set yields the static, oracle-lookup scoring of the
    reference and a full set yields the dynamic one.
    """
    config = config or GenerationConfig()
    anchors = {call.anchor for call in reference.calls}
    bad = set(positions) - anchors
    if bad:
        raise ValueError(f"positions are not call anchors in the reference: {sorted(bad)}")

    session = _Session(lm, tokenize(prompt), store, index, trie, config)
    replaced_spans = {
        call.span for call in reference.calls if call.anchor in positions
    }

    t = 0
    tokens = reference.tokens
    span_starts = {span[0]: span for span in replaced_spans}
    while t < len(tokens):
        span = span_starts.get(t)
        if span is not None:
            session.record_forced(DB_START, TokenCategory.DB_START)
            if not session.run_free_call():
                session.truncate_partial_call()
                break
            t = span[1] + 1
            continue
        token = tokens[t]
        scores = session.raw_scores()
        logprob = (
            0.0 if scores is None else scores.get(token.surface, min(scores.values()))
        )
        session.append(token.surface, token.category, logprob)
        t += 1

    mode = "dynamic" if positions else "static"
    return session.scored_sequence(mode), session.outcomes
