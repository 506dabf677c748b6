"""Typed client for the factweave knowledge-store service."""

from .client import (
    ClientSession,
    FactweaveClientError,
    GenerationResult,
    LookupResult,
    MaskResult,
    RetrieveResult,
    ServiceError,
    StoreStats,
    TransportError,
    TrieNext,
)

__version__ = "0.1.0"

__all__ = [
    "ClientSession",
    "FactweaveClientError",
    "GenerationResult",
    "LookupResult",
    "MaskResult",
    "RetrieveResult",
    "ServiceError",
    "StoreStats",
    "TransportError",
    "TrieNext",
]
