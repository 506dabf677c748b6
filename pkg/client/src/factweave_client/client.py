"""Thin typed client for the factweave HTTP service.

One method per endpoint, synchronous calls with explicit timeouts.
Transport failures raise :class:`TransportError` and are retried with
bounded exponential backoff, but only for non-mutating requests; a
mutating request is never resent unless the caller supplies an
idempotency key.  Domain failures raise :class:`ServiceError`, carrying
the service's error code verbatim.

Result objects keep every field the service returned: fields the client
does not model are preserved under ``.extra`` rather than dropped.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import httpx

__all__ = [
    "ClientSession",
    "FactweaveClientError",
    "ServiceError",
    "TransportError",
    "LookupResult",
    "RetrieveResult",
    "StoreStats",
    "TrieNext",
    "MaskResult",
    "GenerationResult",
]


class FactweaveClientError(Exception):
    """Base of both client error families."""


class TransportError(FactweaveClientError):
    """The service could not be reached or violated the wire protocol."""


class ServiceError(FactweaveClientError):
    """The service answered with a structured domain error."""

    def __init__(self, code: str, message: str, status: int):
        self.code = code
        self.message = message
        self.status = status
        super().__init__(f"{code}: {message}")


def _split(payload: Mapping[str, Any], known: Sequence[str]) -> tuple[dict, dict]:
    knowns = {k: payload.get(k) for k in known}
    extra = {k: v for k, v in payload.items() if k not in known}
    return knowns, extra


@dataclass(frozen=True)
class LookupResult:
    outcome: str
    value: str | None = None
    similarity: float | None = None
    matched_entity: str | None = None
    matched_relation: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def is_hit(self) -> bool:
        return self.outcome == "hit"


RetrieveResult = LookupResult


@dataclass(frozen=True)
class StoreStats:
    triplet_count: int
    unique_entity_count: int
    unique_relation_count: int
    unique_value_count: int
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrieNext:
    next_tokens: list[str]
    may_terminate: bool
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MaskResult:
    tokens: list[str]
    categories: list[str]
    mask: list[int]
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GenerationResult:
    text: str
    outcomes: list[dict]
    tokens: list[dict]
    extra: dict = field(default_factory=dict)


class ClientSession:
    """One service connection; not meant to be shared across threads."""

    def __init__(
        self,
        base_url: str,
        timeout: float = 10.0,
        max_attempts: int = 3,
        backoff_seconds: float = 0.1,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        self.base_url = base_url.rstrip("/")
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self._http = httpx.Client(base_url=self.base_url, timeout=timeout)

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- transport ------------------------------------------------------

    def _request(
        self,
        method: str,
        path: str,
        body: dict | None,
        *,
        mutating: bool,
        idempotency_key: str | None = None,
    ) -> dict:
        attempts = self.max_attempts
        if mutating and idempotency_key is None:
            attempts = 1  # never replay a mutation we cannot deduplicate
        headers = {}
        if idempotency_key is not None:
            headers["X-Idempotency-Key"] = idempotency_key
        last_exc: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                time.sleep(self.backoff_seconds * (2 ** (attempt - 1)))
            try:
                response = self._http.request(method, path, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_exc = exc
                continue
            return self._decode(response)
        raise TransportError(f"{method} {path} failed after {attempts} attempt(s): {last_exc}")

    def _decode(self, response: httpx.Response) -> dict:
        try:
            payload = response.json()
        except ValueError as exc:
            raise TransportError(
                f"non-JSON response (HTTP {response.status_code})"
            ) from exc
        if response.is_success:
            if not isinstance(payload, dict):
                raise TransportError("response body must be a JSON object")
            return payload
        error = payload.get("error") if isinstance(payload, dict) else None
        if not isinstance(error, dict) or "code" not in error:
            raise TransportError(
                f"malformed error body (HTTP {response.status_code})"
            )
        raise ServiceError(
            str(error["code"]), str(error.get("message", "")), response.status_code
        )

    # -- endpoint methods -------------------------------------------------

    def lookup(self, entity: str, relation: str) -> LookupResult:
        payload = self._request(
            "POST", "/lookup", {"entity": entity, "relation": relation}, mutating=False
        )
        known, extra = _split(
            payload, ("outcome", "value", "similarity", "matched_entity", "matched_relation")
        )
        return LookupResult(**known, extra=extra)

    def retrieve(
        self, entity: str, relation: str, threshold: float | None = None
    ) -> RetrieveResult:
        body: dict = {"entity": entity, "relation": relation}
        if threshold is not None:
            body["threshold"] = threshold
        payload = self._request("POST", "/retrieve", body, mutating=False)
        known, extra = _split(
            payload, ("outcome", "value", "similarity", "matched_entity", "matched_relation")
        )
        return RetrieveResult(**known, extra=extra)

    def ingest(
        self,
        triplets: Sequence[Mapping[str, str] | Sequence[str]] = (),
        source_id: str = "",
        documents: Sequence[Mapping[str, str]] = (),
        idempotency_key: str | None = None,
    ) -> int:
        body: dict = {"source_id": source_id}
        if triplets:
            body["triplets"] = [
                t if isinstance(t, Mapping) else list(t) for t in triplets
            ]
        if documents:
            body["documents"] = list(documents)
        payload = self._request(
            "POST", "/ingest", body, mutating=True, idempotency_key=idempotency_key
        )
        return int(payload["ingested"])

    def delete(
        self,
        *,
        by_entity: str | None = None,
        by_source: str | None = None,
        by_key: tuple[str, str] | None = None,
        by_triplets: Sequence[Mapping[str, str]] | None = None,
        idempotency_key: str | None = None,
    ) -> int:
        body: dict = {}
        if by_entity is not None:
            body["by_entity"] = by_entity
        if by_source is not None:
            body["by_source"] = by_source
        if by_key is not None:
            body["by_key"] = {"entity": by_key[0], "relation": by_key[1]}
        if by_triplets is not None:
            body["by_triplets"] = list(by_triplets)
        payload = self._request(
            "DELETE", "/triplets", body, mutating=True, idempotency_key=idempotency_key
        )
        return int(payload["deleted"])

    def stats(self) -> StoreStats:
        payload = self._request("GET", "/stats", None, mutating=False)
        known, extra = _split(
            payload,
            (
                "triplet_count",
                "unique_entity_count",
                "unique_relation_count",
                "unique_value_count",
            ),
        )
        return StoreStats(**known, extra=extra)

    def trie_next(self, prefix: Sequence[str] = ()) -> TrieNext:
        payload = self._request(
            "POST", "/trie/next", {"prefix": list(prefix)}, mutating=False
        )
        known, extra = _split(payload, ("next", "may_terminate"))
        return TrieNext(
            next_tokens=list(known["next"] or []),
            may_terminate=bool(known["may_terminate"]),
            extra=extra,
        )

    def mask(self, text: str, fmt: str = "token_form") -> MaskResult:
        payload = self._request(
            "POST", "/mask", {"text": text, "format": fmt}, mutating=False
        )
        known, extra = _split(payload, ("tokens", "categories", "mask"))
        return MaskResult(
            tokens=list(known["tokens"] or []),
            categories=list(known["categories"] or []),
            mask=list(known["mask"] or []),
            extra=extra,
        )

    def ppl(self, mode: str, tokens: Sequence[Mapping[str, Any]]) -> float:
        payload = self._request(
            "POST", "/ppl", {"mode": mode, "tokens": list(tokens)}, mutating=False
        )
        return float(payload["ppl"])

    def generate(
        self,
        script: Sequence[str],
        vocab: Sequence[str] = (),
        prompt: str = "",
        **options: Any,
    ) -> GenerationResult:
        body = {
            "script": {"script": list(script), "vocab": list(vocab)},
            "prompt": prompt,
            **options,
        }
        payload = self._request("POST", "/generate", body, mutating=False)
        known, extra = _split(payload, ("text", "outcomes", "tokens"))
        return GenerationResult(
            text=str(known["text"]),
            outcomes=list(known["outcomes"] or []),
            tokens=list(known["tokens"] or []),
            extra=extra,
        )

    def snapshot_save(self, path: str, idempotency_key: str | None = None) -> dict:
        return self._request(
            "POST",
            "/snapshot/save",
            {"path": path},
            mutating=True,
            idempotency_key=idempotency_key,
        )

    def snapshot_load(self, path: str, idempotency_key: str | None = None) -> dict:
        return self._request(
            "POST",
            "/snapshot/load",
            {"path": path},
            mutating=True,
            idempotency_key=idempotency_key,
        )
