"""Persistent multiset of knowledge triplets keyed by (entity, relation).

Each (key, value) pair carries an occurrence count, a first-insertion
ordinal (unique across the store, used for deterministic tie-breaks)
and per-source occurrence counts so that unlearning can remove exactly
the facts a forgotten document contributed.

Snapshots are sorted, escaped TSV with a trailing sha256 line, so two
stores with the same contents produce byte-identical files.  Source
attribution is not part of the snapshot schema: by-source deletion
covers facts ingested since the last load.
"""

from __future__ import annotations

import hashlib
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from .markup import Triplet, normalize_text

SNAPSHOT_HEADER = "#factweave-snapshot v1"


class CorruptSnapshot(ValueError):
    """Snapshot failed structural or checksum validation."""


class StoreKey(NamedTuple):
    entity: str
    relation: str

    @classmethod
    def of(cls, entity: str, relation: str) -> "StoreKey":
        return cls(normalize_text(entity), normalize_text(relation))


@dataclass(frozen=True)
class StoreStats:
    triplet_count: int
    unique_entity_count: int
    unique_relation_count: int
    unique_value_count: int

    def as_dict(self) -> dict:
        return {
            "triplet_count": self.triplet_count,
            "unique_entity_count": self.unique_entity_count,
            "unique_relation_count": self.unique_relation_count,
            "unique_value_count": self.unique_value_count,
        }


class _Pair:
    """One (key, value) pair: occurrence count plus bookkeeping."""

    __slots__ = ("count", "ordinal", "sources")

    def __init__(self, ordinal: int):
        self.count = 0
        self.ordinal = ordinal
        self.sources: Counter[str] = Counter()


class TripletStore:
    """In-memory triplet database with multiset semantics.

    Thread safety: a single re-entrant lock guards every public method,
    which satisfies the many-readers-or-one-writer contract (readers
    never observe partial writes) at desk scale.
    """

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._entries: dict[StoreKey, dict[str, _Pair]] = {}
        self._next_ordinal = 0
        self._triplet_count = 0
        self._entity_refs: Counter[str] = Counter()
        self._relation_refs: Counter[str] = Counter()
        self._value_refs: Counter[str] = Counter()
        self.version = 0  # bumped on every mutation; lets caches invalidate

    # -- ingestion ----------------------------------------------------

    def ingest(self, triplets: Iterable[Triplet], source_id: str = "") -> int:
        with self._lock:
            n = 0
            for t in triplets:
                self._add(StoreKey(t.entity, t.relation), t.value, source_id)
                n += 1
            if n:
                self.version += 1
            return n

    def _add(self, key: StoreKey, value: str, source_id: str) -> None:
        values = self._entries.get(key)
        if values is None:
            values = self._entries[key] = {}
            self._entity_refs[key.entity] += 1
            self._relation_refs[key.relation] += 1
        pair = values.get(value)
        if pair is None:
            pair = values[value] = _Pair(self._next_ordinal)
            self._next_ordinal += 1
            self._value_refs[value] += 1
        pair.count += 1
        pair.sources[source_id] += 1
        self._triplet_count += 1

    # -- lookup -------------------------------------------------------

    def lookup_exact(self, key: StoreKey) -> str | None:
        """Majority value for the key, earliest-ordinal tie-break; None if absent."""
        with self._lock:
            values = self._entries.get(key)
            if not values:
                return None
            best = min(values.items(), key=lambda kv: (-kv[1].count, kv[1].ordinal))
            return best[0]

    def __contains__(self, key: StoreKey) -> bool:
        with self._lock:
            return key in self._entries

    def keys(self) -> list[tuple[StoreKey, int]]:
        """Distinct keys with their insertion ordinals (min over live pairs)."""
        with self._lock:
            out = [
                (key, min(p.ordinal for p in values.values()))
                for key, values in self._entries.items()
            ]
            out.sort(key=lambda kv: kv[1])
            return out

    def values_of(self, key: StoreKey) -> list[tuple[str, int, int]]:
        """(value, count, ordinal) rows for one key, ordinal order."""
        with self._lock:
            values = self._entries.get(key, {})
            rows = [(v, p.count, p.ordinal) for v, p in values.items()]
            rows.sort(key=lambda r: r[2])
            return rows

    def sources_of(self, key: StoreKey) -> set[str]:
        with self._lock:
            values = self._entries.get(key, {})
            out: set[str] = set()
            for pair in values.values():
                out.update(pair.sources)
            return out

    # -- deletion -----------------------------------------------------

    def delete_matching(
        self,
        *,
        by_key: StoreKey | tuple[str, str] | None = None,
        by_entity: str | None = None,
        by_source: str | None = None,
        by_triplet_list: Sequence[Triplet] | None = None,
    ) -> int:
        """Remove matching occurrences; returns the occurrence count removed."""
        selectors = [by_key, by_entity, by_source, by_triplet_list]
        if sum(s is not None for s in selectors) != 1:
            raise ValueError("exactly one deletion selector is required")
        with self._lock:
            if by_key is not None:
                removed = self._delete_key(StoreKey.of(*by_key))
            elif by_entity is not None:
                entity = normalize_text(by_entity)
                keys = [k for k in self._entries if k.entity == entity]
                removed = sum(self._delete_key(k) for k in keys)
            elif by_source is not None:
                removed = self._delete_source(by_source)
            else:
                removed = 0
                assert by_triplet_list is not None
                for t in by_triplet_list:
                    removed += self._delete_occurrence(
                        StoreKey(t.entity, t.relation), t.value
                    )
            if removed:
                self.version += 1
            return removed

    def _delete_key(self, key: StoreKey) -> int:
        values = self._entries.get(key)
        if values is None:
            return 0
        removed = 0
        for value, pair in list(values.items()):
            removed += pair.count
            self._drop_pair(key, value)
        return removed

    def _delete_source(self, source_id: str) -> int:
        removed = 0
        for key in list(self._entries):
            values = self._entries[key]
            for value, pair in list(values.items()):
                hit = pair.sources.pop(source_id, 0)
                if not hit:
                    continue
                removed += hit
                pair.count -= hit
                self._triplet_count -= hit
                if pair.count <= 0:
                    self._drop_pair(key, value, already_counted=True)
        return removed

    def _delete_occurrence(self, key: StoreKey, value: str) -> int:
        values = self._entries.get(key)
        if values is None or value not in values:
            return 0
        pair = values[value]
        pair.count -= 1
        self._triplet_count -= 1
        # occurrence-level deletion is not attributed to a source; shrink
        # an arbitrary-but-deterministic source bucket to keep sums tight
        for src in sorted(pair.sources):
            pair.sources[src] -= 1
            if pair.sources[src] <= 0:
                del pair.sources[src]
            break
        if pair.count <= 0:
            self._drop_pair(key, value, already_counted=True)
        return 1

    def _drop_pair(self, key: StoreKey, value: str, already_counted: bool = False) -> None:
        values = self._entries[key]
        pair = values.pop(value)
        if not already_counted:
            self._triplet_count -= pair.count
        self._value_refs[value] -= 1
        if self._value_refs[value] <= 0:
            del self._value_refs[value]
        if not values:
            del self._entries[key]
            for refs, field in ((self._entity_refs, key.entity), (self._relation_refs, key.relation)):
                refs[field] -= 1
                if refs[field] <= 0:
                    del refs[field]

    # -- stats and snapshots -------------------------------------------

    def stats(self) -> StoreStats:
        with self._lock:
            return StoreStats(
                triplet_count=self._triplet_count,
                unique_entity_count=len(self._entity_refs),
                unique_relation_count=len(self._relation_refs),
                unique_value_count=len(self._value_refs),
            )

    def save_snapshot(self, path) -> StoreStats:
        with self._lock:
            rows = []
            for key, values in self._entries.items():
                for value, pair in values.items():
                    rows.append((key.entity, key.relation, value, pair.count, pair.ordinal))
            rows.sort(key=lambda r: (r[0], r[1], r[2]))
            body = SNAPSHOT_HEADER + "\n"
            body += "".join(
                "\t".join((_escape(e), _escape(r), _escape(v), str(c), str(o))) + "\n"
                for e, r, v, c, o in rows
            )
            digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(body)
                fh.write(f"#sha256 {digest}\n")
            return self.stats()

    @classmethod
    def load_snapshot(cls, path) -> "TripletStore":
        with open(path, "rb") as fh:
            raw = fh.read()
        text = raw.decode("utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or not lines[-1].startswith("#sha256 "):
            raise CorruptSnapshot("missing checksum line")
        checksum = lines.pop().split(" ", 1)[1].strip()
        body = "".join(line + "\n" for line in lines)
        if hashlib.sha256(body.encode("utf-8")).hexdigest() != checksum:
            raise CorruptSnapshot("checksum mismatch")
        if not lines or lines[0] != SNAPSHOT_HEADER:
            raise CorruptSnapshot("bad or missing snapshot header")

        store = cls()
        max_ordinal = -1
        for lineno, line in enumerate(lines[1:], start=2):
            fields = line.split("\t")
            if len(fields) != 5:
                raise CorruptSnapshot(f"line {lineno}: expected 5 fields")
            entity, relation, value = (_unescape(f) for f in fields[:3])
            try:
                count, ordinal = int(fields[3]), int(fields[4])
            except ValueError as exc:
                raise CorruptSnapshot(f"line {lineno}: bad count/ordinal") from exc
            if count < 1:
                raise CorruptSnapshot(f"line {lineno}: count must be >= 1")
            key = StoreKey(entity, relation)
            values = store._entries.setdefault(key, {})
            if not values:
                store._entity_refs[entity] += 1
                store._relation_refs[relation] += 1
            if value in values:
                raise CorruptSnapshot(f"line {lineno}: duplicate (key, value) row")
            pair = _Pair(ordinal)
            pair.count = count
            values[value] = pair
            store._value_refs[value] += 1
            store._triplet_count += count
            max_ordinal = max(max_ordinal, ordinal)
        store._next_ordinal = max_ordinal + 1
        return store


def _escape(field: str) -> str:
    return field.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(field: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(field):
        c = field[i]
        if c == "\\" and i + 1 < len(field):
            nxt = field[i + 1]
            if nxt == "t":
                out.append("\t")
            elif nxt == "n":
                out.append("\n")
            elif nxt == "\\":
                out.append("\\")
            else:
                raise CorruptSnapshot(f"bad escape sequence \\{nxt}")
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)
