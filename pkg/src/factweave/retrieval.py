"""Embedding-based fuzzy key retrieval with a cosine rejection threshold.

Queries render as ``entity <|sep|> relation`` and are matched against
one vector per distinct store key.  The default provider hashes
character trigrams (FNV-1a 64-bit, 256 buckets) so the whole pipeline
runs deterministically with no model downloads; any sentence encoder
satisfying :class:`EmbeddingProvider` can be plugged in instead.

The index is an exact exhaustive scan over normalized vectors: results
must match a brute-force oracle bit-for-bit on the argmax, so no
approximate shortcuts are taken.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .markup import SEP
from .store import StoreKey, TripletStore

DEFAULT_THRESHOLD = 0.6

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class UnembeddableText(ValueError):
    """Text has no embeddable content (empty or whitespace-only)."""


class EmbeddingProvider(Protocol):
    name: str
    dimension: int
    version: str

    def embed(self, text: str) -> np.ndarray:
        """Deterministic unit-norm vector for non-empty text."""
        ...


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class TrigramEmbeddingProvider:
    """Hashed character-trigram embeddings, D=256, fixed seed.

    Text is lowercased and padded with ``^``/``$`` boundary markers;
    each trigram hashes into one of 256 count buckets; the counts are
    L2-normalized.  Identical text always yields the identical vector,
    so embeddings are memoized.
    """

    name = "hashed-char-trigram"
    dimension = 256
    version = "1"

    def __init__(self) -> None:
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        if not text.strip():
            raise UnembeddableText("cannot embed empty or whitespace-only text")
        padded = "^" + text.lower() + "$"
        counts = np.zeros(self.dimension, dtype=np.float64)
        for i in range(len(padded) - 2):
            bucket = fnv1a_64(padded[i : i + 3].encode("utf-8")) % self.dimension
            counts[bucket] += 1.0
        vec = counts / np.linalg.norm(counts)
        vec.flags.writeable = False
        self._cache[text] = vec
        return vec


def render_query(key: StoreKey) -> str:
    """Canonical embedding text for a key."""
    return f"{key.entity} {SEP} {key.relation}"


@dataclass(frozen=True)
class RetrievalResult:
    outcome: str  # "hit" | "unknown"
    similarity: float  # max cosine seen; -inf on an empty index
    value: str | None = None
    matched_key: StoreKey | None = None
    unembeddable: bool = False

    @property
    def is_hit(self) -> bool:
        return self.outcome == "hit"


class CosineIndex:
    """Immutable cosine index over the distinct keys of a store."""

    def __init__(
        self,
        store: TripletStore,
        provider: EmbeddingProvider,
        keys: list[StoreKey],
        ordinals: list[int],
        matrix: np.ndarray,
        skipped: list[StoreKey],
    ):
        self._store = store
        self.provider = provider
        self.keys = keys
        self.ordinals = ordinals
        self.matrix = matrix
        self.skipped = skipped

    def __len__(self) -> int:
        return len(self.keys)

    def retrieve(
        self, key: StoreKey, threshold: float = DEFAULT_THRESHOLD
    ) -> RetrievalResult:
        """Nearest stored key by cosine; Unknown below the threshold.

        Similarity equal to the threshold accepts.  Ties between stored
        keys break toward the lowest insertion ordinal.
        """
        if not -1.0 <= threshold <= 1.0:
            raise ValueError("threshold must lie in [-1, 1]")
        if not self.keys:
            return RetrievalResult(outcome="unknown", similarity=float("-inf"))
        try:
            query = self.provider.embed(render_query(key))
        except UnembeddableText:
            return RetrievalResult(
                outcome="unknown", similarity=float("-inf"), unembeddable=True
            )
        sims = self.matrix @ query
        # rows are sorted by ordinal, so the first argmax is the tie-winner
        best = int(np.argmax(sims))
        similarity = float(sims[best])
        if similarity < threshold:
            return RetrievalResult(outcome="unknown", similarity=similarity)
        matched = self.keys[best]
        value = self._store.lookup_exact(matched)
        if value is None:  # key deleted since the index was built
            return RetrievalResult(outcome="unknown", similarity=similarity)
        return RetrievalResult(
            outcome="hit", similarity=similarity, value=value, matched_key=matched
        )


def build_index(store: TripletStore, provider: EmbeddingProvider) -> CosineIndex:
    """Embed one vector per distinct key; unembeddable keys are skipped."""
    keys: list[StoreKey] = []
    ordinals: list[int] = []
    rows: list[np.ndarray] = []
    skipped: list[StoreKey] = []
    for key, ordinal in store.keys():  # ordinal-sorted for tie-breaking
        try:
            vec = provider.embed(render_query(key))
        except UnembeddableText:
            skipped.append(key)
            continue
        keys.append(key)
        ordinals.append(ordinal)
        rows.append(vec)
    matrix = (
        np.vstack(rows)
        if rows
        else np.zeros((0, provider.dimension), dtype=np.float64)
    )
    return CosineIndex(store, provider, keys, ordinals, matrix, skipped)


def retrieve(
    index: CosineIndex, key: StoreKey, threshold: float = DEFAULT_THRESHOLD
) -> RetrievalResult:
    return index.retrieve(key, threshold)
