"""Scalar accounting over scored token sequences.

Covers the negative log-likelihood and the three perplexity variants
used to compare database-augmented models against plain ones, plus the
selective-offloading ranker and the annotation-filter rule:

* ``nll``: -sum of log-probs over loss-bearing (mask==1) tokens.
* ``ppl_over_original``: perplexity over original-text tokens only;
  serves both the static (oracle lookups) and dynamic (live lookups)
  settings, which differ in how the log-probs were produced, not in
  the formula.
* ``ppl_normalized``: sum over all mask==1 tokens, but normalized by
  the original-text token count, so query-argument likelihood is paid
  for without inflating the denominator.

Sums run left-to-right in double precision; tolerances in the tests
guard drift against an independent summation oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

from .markup import (
    MASKED_CATEGORIES,
    AnnotatedDocument,
    Token,
    TokenCategory,
    detokenize,
    parse_tokenform,
)


class EmptyOriginal(ValueError):
    """Perplexity requested over a sequence with no original tokens."""


class UnknownOccurrenceId(KeyError):
    """Revert asked to keep a call occurrence the document does not have."""


@dataclass(frozen=True)
class ScoredToken:
    token: Token
    logprob: float
    mask: int
    spliced: bool = False

    def __post_init__(self):
        if not math.isfinite(self.logprob):
            raise ValueError("logprob must be finite")
        if self.mask not in (0, 1):
            raise ValueError("mask must be 0 or 1")


@dataclass(frozen=True)
class ScoredSequence:
    tokens: tuple[ScoredToken, ...]
    mode: str = "static"  # "static" | "dynamic"

    @property
    def original_token_count(self) -> int:
        return sum(
            1 for t in self.tokens if t.token.category is TokenCategory.ORIGINAL
        )


def make_scored_sequence(
    doc: AnnotatedDocument, logprobs: Sequence[float], mode: str = "static"
) -> ScoredSequence:
    """Pair a document with per-token log-probs; masks follow categories."""
    if len(logprobs) != len(doc.tokens):
        raise ValueError("one logprob per token required")
    tokens = tuple(
        ScoredToken(
            token=t,
            logprob=lp,
            mask=0 if t.category in MASKED_CATEGORIES else 1,
        )
        for t, lp in zip(doc.tokens, logprobs)
    )
    return ScoredSequence(tokens=tokens, mode=mode)


def nll(seq: ScoredSequence) -> float:
    total = 0.0
    for t in seq.tokens:
        if t.mask == 1:
            total += t.logprob
    return -total if total else 0.0


def ppl_over_original(seq: ScoredSequence) -> float:
    count = 0
    total = 0.0
    for t in seq.tokens:
        if t.token.category is TokenCategory.ORIGINAL:
            total += t.logprob
            count += 1
    if count == 0:
        raise EmptyOriginal("no original tokens to normalize over")
    return math.exp(-total / count)


def ppl_normalized(seq: ScoredSequence) -> float:
    n_org = seq.original_token_count
    if n_org == 0:
        raise EmptyOriginal("no original tokens to normalize over")
    total = 0.0
    for t in seq.tokens:
        if t.mask == 1:
            total += t.logprob
    return math.exp(-total / n_org)


@dataclass(frozen=True)
class DeltaLossRecord:
    """Per-triplet mean loss gap (plain-model minus lookup-model) on the
    tokens right after the lookup."""

    triplet_id: object
    delta: float


def _ceil_fraction(fraction: float, n: int) -> int:
    """ceil(fraction * n) with protection against float dust (0.9*10 -> 9)."""
    product = fraction * n
    nearest = round(product)
    if abs(product - nearest) < 1e-9:
        return int(nearest)
    return math.ceil(product)


def rank_offload(
    records: Sequence[DeltaLossRecord], keep_ratio: float
) -> tuple[set, float]:
    """Keep the top ceil(ratio*N) records by loss difference.

    Returns the kept triplet ids and the threshold (the smallest kept
    delta; +inf when nothing is kept).  Ties break toward lower ids.
    """
    if not 0.0 <= keep_ratio <= 1.0:
        raise ValueError("keep_ratio must lie in [0, 1]")
    if keep_ratio > 0 and not records:
        raise ValueError("no records to rank")
    k = _ceil_fraction(keep_ratio, len(records))
    if k == 0:
        return set(), float("inf")
    ordered = sorted(records, key=lambda r: (-r.delta, r.triplet_id))
    kept = ordered[:k]
    return {r.triplet_id for r in kept}, kept[-1].delta


def corrector_filter(
    calls: Sequence[tuple], discard_fraction: float = 0.10
) -> list:
    """Drop the highest-loss fraction of calls; ties drop the higher id.

    ``calls`` is (call_id, loss) pairs; retained ids come back in their
    original order.
    """
    if not 0.0 <= discard_fraction < 1.0:
        raise ValueError("discard_fraction must lie in [0, 1)")
    d = _ceil_fraction(discard_fraction, len(calls))
    if d == 0:
        return [cid for cid, _ in calls]
    by_loss = sorted(calls, key=lambda c: (-c[1], _ReverseOrder(c[0])))
    discarded = {cid for cid, _ in by_loss[:d]}
    return [cid for cid, _ in calls if cid not in discarded]


class _ReverseOrder:
    """Sort-key adapter that inverts comparisons for arbitrary ids."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value

    def __lt__(self, other):
        return other.value < self.value

    def __eq__(self, other):
        return other.value == self.value


def revert_annotations(doc: AnnotatedDocument, keep: set) -> AnnotatedDocument:
    """Remove every call occurrence not in ``keep`` (indices into doc.calls).

    A removed call's block disappears entirely; the duplicated surface
    text that follows it is original text and stays put.
    """
    valid = set(range(len(doc.calls)))
    unknown = set(keep) - valid
    if unknown:
        raise UnknownOccurrenceId(sorted(unknown))
    drop: list[tuple[int, int]] = [
        call.span for i, call in enumerate(doc.calls) if i not in keep
    ]
    surfaces = []
    for t in doc.tokens:
        if any(start <= t.index <= end for start, end in drop):
            continue
        surfaces.append(t.surface)
    return parse_tokenform(detokenize(surfaces))


def post_lookup_window(
    doc: AnnotatedDocument, call_index: int, width: int = 5
) -> list[int]:
    """Indices of the first ``width`` original tokens after a call.

    This is the token window the offload ranker's loss differences are
    measured over; shorter when the document ends first.
    """
    call = doc.calls[call_index]
    out: list[int] = []
    for t in doc.tokens[call.span[1] + 1 :]:
        if t.category is TokenCategory.ORIGINAL:
            out.append(t.index)
            if len(out) == width:
                break
    return out


# -- interchange files ------------------------------------------------


def write_scored_jsonl(path, seq: ScoredSequence) -> None:
    """One token per line: {"surface", "category", "logprob", "mask"}."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in seq.tokens:
            fh.write(
                json.dumps(
                    {
                        "surface": t.token.surface,
                        "category": t.token.category.value,
                        "logprob": t.logprob,
                        "mask": t.mask,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_scored_jsonl(path, mode: str = "static") -> ScoredSequence:
    tokens: list[ScoredToken] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            tokens.append(scored_token_from_dict(row, index=len(tokens)))
    return ScoredSequence(tokens=tuple(tokens), mode=mode)


def scored_token_from_dict(row: dict, index: int) -> ScoredToken:
    category = TokenCategory(row["category"])
    return ScoredToken(
        token=Token(surface=row["surface"], category=category, index=index),
        logprob=float(row["logprob"]),
        mask=int(row["mask"]),
    )


def read_delta_jsonl(path) -> list[DeltaLossRecord]:
    """Records of {"triplet_id", "delta"} per line."""
    out: list[DeltaLossRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            out.append(DeltaLossRecord(row["triplet_id"], float(row["delta"])))
    return out
