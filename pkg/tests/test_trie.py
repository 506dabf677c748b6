from __future__ import annotations

import random

import pytest

from factweave.markup import SEP, Triplet, tokenize
from factweave.store import StoreKey, TripletStore
from factweave.trie import (
    END_OF_QUERY,
    DeadEnd,
    EmptyTrie,
    build_trie,
    constrained_walk,
)


def store_with(keys):
    store = TripletStore()
    store.ingest([Triplet(e, r, f"value-of-{e}-{r}") for e, r in keys], "fixture")
    return store


def key_token_sequences(store):
    return {
        key: tuple(tokenize(key.entity) + [SEP] + tokenize(key.relation))
        for key, _ in store.keys()
    }


def lexicographic_scorer(options, may_terminate):
    if options:
        return options[0]  # options arrive sorted
    assert may_terminate
    return END_OF_QUERY


TWO_KEY_STORE = [("Napoleon", "Birth Date"), ("Napoleon", "Birthplace")]


class TestBuildTrie:
    def test_empty_store(self):
        trie = build_trie(TripletStore())
        assert trie.terminal_count == 0
        assert trie.allowed_next([]) == (set(), False)

    def test_shared_prefix_branches(self):
        # oracle: manual construction from the tokenizer's output
        trie = build_trie(store_with(TWO_KEY_STORE))
        assert trie.terminal_count == 2
        assert trie.allowed_next([]) == ({"Napoleon"}, False)
        assert trie.allowed_next(["Napoleon"]) == ({SEP}, False)
        assert trie.allowed_next(["Napoleon", SEP]) == ({"Birth", "Birthplace"}, False)
        assert trie.allowed_next(["Napoleon", SEP, "Birth"]) == ({"Date"}, False)
        assert trie.allowed_next(["Napoleon", SEP, "Birth", "Date"]) == (set(), True)

    def test_duplicate_insert_keeps_terminal_count(self):
        store = TripletStore()
        store.ingest([Triplet("A", "r", "v1"), Triplet("A", "r", "v2")], "d")
        assert build_trie(store).terminal_count == 1

    def test_dead_end_prefix(self):
        trie = build_trie(store_with(TWO_KEY_STORE))
        assert trie.allowed_next(["Wellington"]) == (set(), False)


class TestConstrainedWalk:
    def test_lexicographic_walk(self):
        trie = build_trie(store_with(TWO_KEY_STORE))
        key, path = constrained_walk(trie, lexicographic_scorer)
        assert key == StoreKey("Napoleon", "Birth Date")
        assert path == ["Napoleon", SEP, "Birth", "Date"]

    def test_single_key_any_scorer(self):
        trie = build_trie(store_with([("Ada", "Known For")]))
        key, _ = constrained_walk(trie, lexicographic_scorer)
        assert key == StoreKey("Ada", "Known For")

    def test_empty_trie(self):
        with pytest.raises(EmptyTrie):
            constrained_walk(build_trie(TripletStore()), lexicographic_scorer)

    def test_scorer_contract_violation(self):
        trie = build_trie(store_with(TWO_KEY_STORE))
        with pytest.raises(DeadEnd):
            constrained_walk(trie, lambda options, term: "Wellington")

    def test_premature_termination_rejected(self):
        trie = build_trie(store_with(TWO_KEY_STORE))
        with pytest.raises(DeadEnd):
            constrained_walk(trie, lambda options, term: END_OF_QUERY)

    def test_prefix_key_offers_both_options(self):
        # one key a strict prefix of another: termination offered alongside
        store = store_with([("A", "long"), ("A", "long tail")])
        trie = build_trie(store)
        _, terminate_allowed = trie.allowed_next(["A", SEP, "long"])
        assert terminate_allowed
        assert trie.allowed_next(["A", SEP, "long"])[0] == {"tail"}

        def eager(options, may_terminate):
            return END_OF_QUERY if may_terminate else options[0]

        key, _ = constrained_walk(trie, eager)
        assert key == StoreKey("A", "long")


class TestSoundnessCompleteness:
    def test_random_stores(self):
        rng = random.Random(42)
        for round_no in range(30):
            n_keys = rng.randrange(1, 40)
            keys = {
                (
                    f"e{rng.randrange(12)} p{rng.randrange(4)}",
                    f"rel{rng.randrange(8)}",
                )
                for _ in range(n_keys)
            }
            store = store_with(sorted(keys))
            trie = build_trie(store)
            stored = {key for key, _ in store.keys()}

            # completeness: exhaustive enumeration reaches every stored key
            assert set(trie.iter_keys()) == stored
            assert trie.terminal_count == len(stored)

            # soundness: random walks always land on stored keys
            for _ in range(10):
                def random_scorer(options, may_terminate):
                    choices = list(options)
                    if may_terminate:
                        choices.append(END_OF_QUERY)
                    return rng.choice(choices)

                key, _ = constrained_walk(trie, random_scorer)
                assert key in stored
                assert store.lookup_exact(key) is not None

            # allowed_next equals a brute-force filter over token sequences
            sequences = key_token_sequences(store)
            prefixes = {()}
            for seq in sequences.values():
                for cut in range(1, len(seq) + 1):
                    prefixes.add(seq[:cut])
            prefixes.add(("bogus",))
            for prefix in prefixes:
                nxt, term = trie.allowed_next(list(prefix))
                brute_next = {
                    seq[len(prefix)]
                    for seq in sequences.values()
                    if len(seq) > len(prefix) and seq[: len(prefix)] == prefix
                }
                brute_term = any(seq == prefix for seq in sequences.values())
                assert nxt == brute_next
                assert term == brute_term

    def test_rebuild_after_delete_unreaches_key(self):
        store = store_with(TWO_KEY_STORE + [("Wellington", "Birth Date")])
        store.delete_matching(by_entity="Wellington")
        trie = build_trie(store)
        assert StoreKey("Wellington", "Birth Date") not in set(trie.iter_keys())
        assert trie.allowed_next(["Wellington"]) == (set(), False)
