"""Lookup-call markup: tokenizer, both annotation syntaxes, loss masking.

A lookup call interleaves a database query with running text.  Two
surface syntaxes describe the same call:

* token form::

    <|db_start|> Napoleon <|sep|> Birth_Date <|db_retrieve|> August 15, 1769 <|db_end|>

* inline form::

    [dblookup('Napoleon', 'Birth_Date') -> August 15, 1769]

Both parse into an :class:`AnnotatedDocument` whose tokens carry one
category each.  The loss mask zeroes the retrieved value tokens and the
closing ``<|db_end|>``; everything else (original text, the query
arguments, the remaining delimiters) is scored.

Tokenization is deterministic and desk-scale: the four special tokens
are matched as atomic units, the remainder splits on whitespace, and
trailing punctuation characters are peeled into their own tokens.
``detokenize`` is the canonical inverse join: it re-attaches peeled
punctuation, so ``detokenize(tokenize(s)) == s`` for canonical text.

Inline escaping convention: entity and relation are single-quoted with
a doubled quote (``''``) escaping a literal quote.  A value is written
raw unless it contains ``]`` or starts with a quote, in which case it
is single-quoted under the same doubling rule.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, NamedTuple, Sequence

DB_START = "<|db_start|>"
SEP = "<|sep|>"
DB_RETRIEVE = "<|db_retrieve|>"
DB_END = "<|db_end|>"

SPECIAL_TOKENS = (DB_START, SEP, DB_RETRIEVE, DB_END)

# Punctuation peeled off the end of whitespace-separated words.
TRAILING_PUNCTUATION = frozenset(".,;:!?'\"()")

_INLINE_OPEN = "[dblookup("


class TokenCategory(Enum):
    ORIGINAL = "original"
    DB_START = "db_start"
    SEP = "sep"
    DB_RETRIEVE = "db_retrieve"
    DB_END = "db_end"
    ENTITY = "entity"
    RELATION = "relation"
    VALUE = "value"


_SPECIAL_CATEGORY = {
    DB_START: TokenCategory.DB_START,
    SEP: TokenCategory.SEP,
    DB_RETRIEVE: TokenCategory.DB_RETRIEVE,
    DB_END: TokenCategory.DB_END,
}

# Categories excluded from the training loss: retrieved values and the
# closing delimiter, which is spliced mechanically after retrieval.
MASKED_CATEGORIES = frozenset({TokenCategory.VALUE, TokenCategory.DB_END})


class MalformedAnnotation(ValueError):
    """Annotation text violates the call grammar.

    ``position`` is a token index for token-form input and a character
    offset for inline input.
    """

    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"malformed annotation at {position}: {reason}")


class TruncatedCallWarning(UserWarning):
    """A trailing unterminated call was dropped in lenient parsing."""


@dataclass(frozen=True)
class Token:
    surface: str
    category: TokenCategory
    index: int


class Triplet(NamedTuple):
    entity: str
    relation: str
    value: str


@dataclass(frozen=True)
class LookupCall:
    entity: str
    relation: str
    value: str
    span: tuple[int, int]  # [start, end] token indices, inclusive
    anchor: int  # first Original token after the call, or token count

    def triplet(self) -> Triplet:
        return Triplet(self.entity, self.relation, self.value)


@dataclass(frozen=True)
class AnnotatedDocument:
    tokens: tuple[Token, ...]
    calls: tuple[LookupCall, ...]

    @property
    def original_token_count(self) -> int:
        return sum(1 for t in self.tokens if t.category is TokenCategory.ORIGINAL)

    def surfaces(self) -> list[str]:
        return [t.surface for t in self.tokens]


def normalize_text(text: str) -> str:
    """Trim and collapse whitespace runs; case is preserved."""
    return " ".join(text.split())


def tokenize(text: str) -> list[str]:
    """Segment text into surface tokens.

    Special tokens are atomic; other text splits on whitespace and
    trailing punctuation characters peel into their own tokens, e.g.
    ``"1769."`` becomes ``["1769", "."]``.
    """
    surfaces: list[str] = []
    for piece in _split_specials(text):
        if piece in _SPECIAL_CATEGORY:
            surfaces.append(piece)
            continue
        for word in piece.split():
            surfaces.extend(_peel(word))
    return surfaces


def _split_specials(text: str) -> Iterator[str]:
    pos = 0
    while pos < len(text):
        hit, at = None, len(text)
        for tok in SPECIAL_TOKENS:
            found = text.find(tok, pos)
            if found != -1 and found < at:
                hit, at = tok, found
        if hit is None:
            yield text[pos:]
            return
        if at > pos:
            yield text[pos:at]
        yield hit
        pos = at + len(hit)


def _peel(word: str) -> list[str]:
    tail: list[str] = []
    while word and word[-1] in TRAILING_PUNCTUATION:
        tail.append(word[-1])
        word = word[:-1]
    out = [word] if word else []
    out.extend(reversed(tail))
    return out


def detokenize(surfaces: Iterable[str]) -> str:
    """Canonical join: single spaces, with peeled punctuation re-attached."""
    chunks: list[str] = []
    for s in surfaces:
        if chunks and len(s) == 1 and s in TRAILING_PUNCTUATION:
            chunks[-1] += s
        else:
            chunks.append(s)
    return " ".join(chunks)


def _contains_special(text: str) -> bool:
    return any(tok in text for tok in SPECIAL_TOKENS)


def _make_document(
    surfaces: Sequence[str],
    categories: Sequence[TokenCategory],
    raw_calls: Sequence[tuple[int, int, list[str], list[str], list[str]]],
) -> AnnotatedDocument:
    tokens = tuple(
        Token(surface=s, category=c, index=i)
        for i, (s, c) in enumerate(zip(surfaces, categories))
    )
    calls = []
    for start, end, ent, rel, val in raw_calls:
        anchor = len(tokens)
        for t in tokens[end + 1 :]:
            if t.category is TokenCategory.ORIGINAL:
                anchor = t.index
                break
        calls.append(
            LookupCall(
                entity=normalize_text(detokenize(ent)),
                relation=normalize_text(detokenize(rel)),
                value=detokenize(val),
                span=(start, end),
                anchor=anchor,
            )
        )
    return AnnotatedDocument(tokens=tokens, calls=tuple(calls))


def parse_tokenform(text: str, *, lenient: bool = False) -> AnnotatedDocument:
    """Parse token-form annotated text.

    In lenient mode a call left unterminated at end of input (a
    generation cut mid-call) is dropped with a warning; any other
    grammar violation raises :class:`MalformedAnnotation` in both modes.
    """
    surfaces = tokenize(text)
    categories: list[TokenCategory] = []
    raw_calls: list[tuple[int, int, list[str], list[str], list[str]]] = []

    phase = "outside"  # outside | entity | relation | value
    start = -1
    ent: list[str] = []
    rel: list[str] = []
    val: list[str] = []

    for i, s in enumerate(surfaces):
        special = _SPECIAL_CATEGORY.get(s)
        if special is TokenCategory.DB_START:
            if phase != "outside":
                raise MalformedAnnotation(i, "nested <|db_start|>")
            phase, start, ent, rel, val = "entity", i, [], [], []
            categories.append(special)
        elif special is TokenCategory.SEP:
            if phase != "entity":
                raise MalformedAnnotation(i, "<|sep|> outside an open entity segment")
            if not ent:
                raise MalformedAnnotation(i, "empty entity")
            phase = "relation"
            categories.append(special)
        elif special is TokenCategory.DB_RETRIEVE:
            if phase != "relation":
                raise MalformedAnnotation(
                    i, "<|db_retrieve|> without a preceding <|sep|>"
                )
            if not rel:
                raise MalformedAnnotation(i, "empty relation")
            phase = "value"
            categories.append(special)
        elif special is TokenCategory.DB_END:
            if phase != "value":
                raise MalformedAnnotation(i, "<|db_end|> without a complete query")
            categories.append(special)
            raw_calls.append((start, i, ent, rel, val))
            phase = "outside"
        elif phase == "outside":
            categories.append(TokenCategory.ORIGINAL)
        elif phase == "entity":
            ent.append(s)
            categories.append(TokenCategory.ENTITY)
        elif phase == "relation":
            rel.append(s)
            categories.append(TokenCategory.RELATION)
        else:
            val.append(s)
            categories.append(TokenCategory.VALUE)

    if phase != "outside":
        if not lenient:
            raise MalformedAnnotation(len(surfaces), "unterminated call at end of input")
        warnings.warn(
            "dropped unterminated call at end of input", TruncatedCallWarning
        )
        surfaces = surfaces[:start]
        categories = categories[:start]

    return _make_document(surfaces, categories, raw_calls)


def convert_inline_to_tokenform(text: str) -> str:
    """Rewrite every ``[dblookup('E', 'R') -> V]`` block into token form."""
    out: list[str] = []
    pos = 0
    while True:
        at = text.find(_INLINE_OPEN, pos)
        if at == -1:
            out.append(text[pos:])
            return "".join(out)
        out.append(text[pos:at])
        i = at + len(_INLINE_OPEN)
        i = _skip_spaces(text, i)
        entity, i = _read_quoted(text, i, at)
        i = _skip_spaces(text, i)
        if i >= len(text) or text[i] != ",":
            raise MalformedAnnotation(i, "expected ',' between entity and relation")
        i = _skip_spaces(text, i + 1)
        relation, i = _read_quoted(text, i, at)
        i = _skip_spaces(text, i)
        if i >= len(text) or text[i] != ")":
            raise MalformedAnnotation(i, "expected ')' after relation")
        i = _skip_spaces(text, i + 1)
        if text[i : i + 2] != "->":
            raise MalformedAnnotation(i, "expected '->' before value")
        i = _skip_spaces(text, i + 2)
        if i < len(text) and text[i] == "'":
            value, i = _read_quoted(text, i, at)
            i = _skip_spaces(text, i)
            if i >= len(text) or text[i] != "]":
                raise MalformedAnnotation(i, "expected ']' after quoted value")
            i += 1
        else:
            end = text.find("]", i)
            if end == -1:
                raise MalformedAnnotation(at, "unterminated inline call")
            value = text[i:end].strip()
            i = end + 1
        out.append(f"{DB_START} {entity} {SEP} {relation} {DB_RETRIEVE} {value} {DB_END}")
        pos = i


def _skip_spaces(text: str, i: int) -> int:
    while i < len(text) and text[i] == " ":
        i += 1
    return i


def _read_quoted(text: str, i: int, block_start: int) -> tuple[str, int]:
    if i >= len(text) or text[i] != "'":
        raise MalformedAnnotation(i, "expected a single-quoted string")
    i += 1
    chars: list[str] = []
    while i < len(text):
        c = text[i]
        if c == "'":
            if i + 1 < len(text) and text[i + 1] == "'":
                chars.append("'")  # doubled quote escapes a literal quote
                i += 2
                continue
            return "".join(chars), i + 1
        chars.append(c)
        i += 1
    raise MalformedAnnotation(block_start, "unterminated quoted string")


def parse_inline(text: str, *, lenient: bool = False) -> AnnotatedDocument:
    """Parse inline-form annotated text (the annotator output syntax)."""
    return parse_tokenform(convert_inline_to_tokenform(text), lenient=lenient)


def _quote(text: str) -> str:
    return "'" + text.replace("'", "''") + "'"


def _inline_value(value: str) -> str:
    if "]" in value or value.startswith("'") or value != value.strip():
        return _quote(value)
    return value


def serialize(doc: AnnotatedDocument, form: str = "token_form") -> str:
    """Render a document back to text; inverse of the parsers.

    ``form`` is ``"token_form"`` or ``"inline"``.  Output is canonical
    single-space text, so ``parse(serialize(doc)) == doc``.
    """
    if form == "token_form":
        return detokenize(t.surface for t in doc.tokens)
    if form != "inline":
        raise ValueError(f"unknown serialization form: {form!r}")

    spans = {call.span[0]: call for call in doc.calls}
    units: list[str] = []
    i = 0
    while i < len(doc.tokens):
        call = spans.get(i)
        if call is not None:
            units.append(
                f"[dblookup({_quote(call.entity)}, {_quote(call.relation)})"
                f" -> {_inline_value(call.value)}]"
            )
            i = call.span[1] + 1
        else:
            surface = doc.tokens[i].surface
            if _INLINE_OPEN in surface:
                # a literal call opener in running text cannot be told
                # apart from a real call after rendering
                raise ValueError(
                    "document text contains the inline call opener and "
                    "cannot be rendered in inline form unambiguously"
                )
            units.append(surface)
            i += 1
    return detokenize(units)


def strip_annotations(doc: AnnotatedDocument) -> str:
    """Recover the original unannotated text (the Original tokens)."""
    return detokenize(
        t.surface for t in doc.tokens if t.category is TokenCategory.ORIGINAL
    )


def extract_triplets(doc: AnnotatedDocument) -> list[Triplet]:
    """One triplet per call, in span order; duplicates preserved."""
    return [call.triplet() for call in doc.calls]


def compute_loss_mask(doc: AnnotatedDocument) -> list[int]:
    """Per-token training mask: 0 on value tokens and ``<|db_end|>``."""
    return [0 if t.category in MASKED_CATEGORIES else 1 for t in doc.tokens]


def build_document(
    prefix: str, calls: Sequence[tuple[str, str, str]], separator: str = " "
) -> AnnotatedDocument:
    """Assemble a canonical document from plain text plus (e, r, v) calls.

    Each call block is followed by its value restated as original text,
    mirroring how annotated corpora duplicate the retrieved span.
    Intended for fixtures and synthetic corpora.
    """
    parts = [prefix] if prefix else []
    for entity, relation, value in calls:
        parts.append(f"{DB_START} {entity} {SEP} {relation} {DB_RETRIEVE} {value} {DB_END}")
        parts.append(value)
    return parse_tokenform(separator.join(parts))


CORPUS_FORMATS = ("token_form", "inline", "plain")


def parse_document(text: str, fmt: str, *, lenient: bool = False) -> AnnotatedDocument:
    if fmt == "inline":
        return parse_inline(text, lenient=lenient)
    if fmt in ("token_form", "plain"):
        return parse_tokenform(text, lenient=lenient)
    raise ValueError(f"unknown corpus format: {fmt!r}")


def read_corpus(path) -> Iterator[dict]:
    """Yield corpus records from a JSON-lines file.

    Records are ``{"id": str, "text": str, "format": str}``; the format
    defaults to ``token_form``.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "id" not in record or "text" not in record:
                raise ValueError(f"{path}:{lineno}: corpus record needs id and text")
            record.setdefault("format", "token_form")
            if record["format"] not in CORPUS_FORMATS:
                raise ValueError(
                    f"{path}:{lineno}: unknown format {record['format']!r}"
                )
            yield record


def write_corpus(path, records: Iterable[dict]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count
