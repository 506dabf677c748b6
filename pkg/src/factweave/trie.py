"""Prefix tree over tokenized query keys for constrained query generation.

Every distinct store key inserts ``tokenize(entity) + [<|sep|>] +
tokenize(relation)``; walking root to a terminal therefore always
spells a key that exists in the database.  Terminal nodes may still
have children (one key can be a strict prefix of another), so walks
offer an explicit termination option instead of guessing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from .markup import SEP, tokenize
from .store import StoreKey, TripletStore


class EmptyTrie(ValueError):
    """Walk requested on a trie with no keys."""


class DeadEnd(ValueError):
    """Scorer chose a token that is not among the offered options."""


# Sentinel offered to scorers at terminal nodes.
END_OF_QUERY = "<end-of-query>"


@dataclass
class _Node:
    children: dict[str, "_Node"] = field(default_factory=dict)
    key: StoreKey | None = None  # set when this node terminates a key

    @property
    def terminal(self) -> bool:
        return self.key is not None


class QueryTrie:
    def __init__(self) -> None:
        self._root = _Node()
        self.terminal_count = 0

    def insert(self, surfaces: Sequence[str], key: StoreKey) -> None:
        node = self._root
        for s in surfaces:
            node = node.children.setdefault(s, _Node())
        if not node.terminal:
            self.terminal_count += 1
        node.key = key

    def _walk(self, prefix: Sequence[str]) -> _Node | None:
        node = self._root
        for s in prefix:
            node = node.children.get(s)
            if node is None:
                return None
        return node

    def allowed_next(self, prefix: Sequence[str]) -> tuple[set[str], bool]:
        """Children reachable from the prefix plus a may-terminate flag.

        A prefix that leaves the trie yields the empty set, terminate
        False (a dead end, not an error).
        """
        node = self._walk(prefix)
        if node is None:
            return set(), False
        return set(node.children), node.terminal

    def iter_keys(self) -> list[StoreKey]:
        """All terminal keys via exhaustive path enumeration."""
        out: list[StoreKey] = []
        stack = [self._root]
        while stack:
            node = stack.pop()
            if node.terminal:
                out.append(node.key)  # type: ignore[arg-type]
            stack.extend(node.children.values())
        return out


def build_trie(store: TripletStore, tokenizer: Callable[[str], list[str]] = tokenize) -> QueryTrie:
    """Insert every distinct key, in insertion-ordinal order."""
    trie = QueryTrie()
    for key, _ordinal in store.keys():
        surfaces = tokenizer(key.entity) + [SEP] + tokenizer(key.relation)
        trie.insert(surfaces, key)
    return trie


def constrained_walk(
    trie: QueryTrie,
    scorer: Callable[[tuple[str, ...], bool], str],
) -> tuple[StoreKey, list[str]]:
    """Drive a scorer along the trie until it terminates on a key.

    The scorer receives the offered child surfaces (sorted) and whether
    termination is available, and must return one of the children or
    ``END_OF_QUERY``.  Returns the terminal key and the token path, so
    the caller can splice the walked surfaces into its output.
    """
    if trie.terminal_count == 0:
        raise EmptyTrie("no keys in trie")
    node = trie._root
    path: list[str] = []
    while True:
        options = tuple(sorted(node.children))
        may_terminate = node.terminal
        choice = scorer(options, may_terminate)
        if choice == END_OF_QUERY:
            if not may_terminate:
                raise DeadEnd("scorer terminated at a non-terminal node")
            assert node.key is not None
            return node.key, path
        nxt = node.children.get(choice)
        if nxt is None:
            raise DeadEnd(f"scorer chose {choice!r}, not an offered option")
        path.append(choice)
        node = nxt
