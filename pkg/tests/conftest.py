"""Shared fixtures and hypothesis strategies for the test suite."""

from __future__ import annotations

import sys

import pytest
from hypothesis import strategies as st

from factweave.markup import (
    DB_END,
    DB_RETRIEVE,
    DB_START,
    SEP,
    TRAILING_PUNCTUATION,
    AnnotatedDocument,
    parse_tokenform,
)

NAPOLEON_TOKENFORM = (
    "Napoleon was born on <|db_start|> Napoleon <|sep|> Birth_Date "
    "<|db_retrieve|> August 15, 1769 <|db_end|> August 15, 1769."
)
NAPOLEON_PLAIN = "Napoleon was born on August 15, 1769."
NAPOLEON_TRIPLET = ("Napoleon", "Birth_Date", "August 15, 1769")


@pytest.fixture
def napoleon_doc() -> AnnotatedDocument:
    return parse_tokenform(NAPOLEON_TOKENFORM)


# -- random canonical documents ----------------------------------------

_LETTERS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789éüñ"

words = st.text(alphabet=_LETTERS, min_size=1, max_size=8)
punct_tokens = st.sampled_from(sorted(TRAILING_PUNCTUATION))
atoms = st.one_of(words, punct_tokens)

# query arguments must be non-empty after normalization
arg_token_lists = st.lists(atoms, min_size=1, max_size=4)
value_token_lists = st.lists(atoms, min_size=0, max_size=5)
original_runs = st.lists(atoms, min_size=0, max_size=6)


@st.composite
def tokenform_texts(draw, max_calls: int = 5) -> str:
    """A canonical token-form string with up to ``max_calls`` calls."""
    n_calls = draw(st.integers(min_value=0, max_value=max_calls))
    parts: list[str] = list(draw(original_runs))
    for _ in range(n_calls):
        entity = draw(arg_token_lists)
        relation = draw(arg_token_lists)
        value = draw(value_token_lists)
        parts.append(DB_START)
        parts.extend(entity)
        parts.append(SEP)
        parts.extend(relation)
        parts.append(DB_RETRIEVE)
        parts.extend(value)
        parts.append(DB_END)
        parts.extend(draw(original_runs))
    from factweave.markup import detokenize

    return detokenize(parts)


@st.composite
def documents(draw, max_calls: int = 5) -> AnnotatedDocument:
    return parse_tokenform(draw(tokenform_texts(max_calls=max_calls)))


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    status = "PASS" if report.passed else "FAIL"
    name = report.nodeid.split("::")[-1]
    sys.stderr.write(f"[{status}] {name}\n")
