"""HTTP JSON service exposing the store, retrieval, trie, masking,
accounting, and generation to external pipelines.

Every endpoint's response is computed by the same library calls an
in-process user would make on the same store state.  Mutating requests
are serialized behind one lock; the cosine index and query trie are
rebuilt lazily after a mutation and swapped atomically, so reads are
always served from a consistent snapshot and observe their own writes.

Error responses are structured, never connection drops:
``{"error": {"code": ..., "message": ...}}``.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import accounting, harness, markup, retrieval
from .markup import MalformedAnnotation, Triplet
from .retrieval import TrigramEmbeddingProvider
from .store import CorruptSnapshot, StoreKey, TripletStore
from .trie import build_trie

ENV_ADDR = "FACTWEAVE_ADDR"
ENV_SNAPSHOT = "FACTWEAVE_SNAPSHOT"
ENV_THRESHOLD = "FACTWEAVE_THRESHOLD"

DEFAULT_ADDR = "127.0.0.1:8472"


class RequestError(Exception):
    def __init__(self, code: str, message: str, status: int = 400):
        self.code = code
        self.message = message
        self.status = status
        super().__init__(message)


@dataclass
class ServiceConfig:
    addr: str = DEFAULT_ADDR
    snapshot_path: str | None = None
    allow_empty: bool = False
    threshold: float = retrieval.DEFAULT_THRESHOLD
    max_request_bytes: int = 8 * 1024 * 1024


def round9(x: float) -> float:
    """Wire format for similarities and perplexities: 9 significant digits."""
    return float(f"{x:.9g}")


def _require(body: dict, field: str):
    if field not in body:
        raise RequestError("bad_request", f"missing field: {field}")
    return body[field]


def _triplet_from(obj) -> Triplet:
    if isinstance(obj, (list, tuple)) and len(obj) == 3:
        entity, relation, value = obj
    elif isinstance(obj, dict):
        try:
            entity, relation, value = obj["entity"], obj["relation"], obj["value"]
        except KeyError as exc:
            raise RequestError("bad_request", f"triplet missing {exc.args[0]}") from exc
    else:
        raise RequestError("bad_request", "triplet must be an object or 3-list")
    return Triplet(
        markup.normalize_text(str(entity)),
        markup.normalize_text(str(relation)),
        str(value),
    )


class FactweaveService:
    """Endpoint logic, independent of the HTTP transport."""

    def __init__(self, store: TripletStore, config: ServiceConfig | None = None):
        self.store = store
        self.config = config or ServiceConfig()
        self.provider = TrigramEmbeddingProvider()
        self._mutate_lock = threading.Lock()
        self._swap_lock = threading.Lock()
        self._index = None
        self._index_version = -1
        self._trie = None
        self._trie_version = -1

    @classmethod
    def from_config(cls, config: ServiceConfig) -> "FactweaveService":
        if config.snapshot_path:
            try:
                store = TripletStore.load_snapshot(config.snapshot_path)
            except FileNotFoundError:
                if not config.allow_empty:
                    raise
                store = TripletStore()
        elif config.allow_empty:
            store = TripletStore()
        else:
            raise ValueError("a snapshot path or the empty-store flag is required")
        return cls(store, config)

    # -- cached derived structures --------------------------------------

    def index(self):
        with self._swap_lock:
            if self._index is None or self._index_version != self.store.version:
                self._index = retrieval.build_index(self.store, self.provider)
                self._index_version = self.store.version
            return self._index

    def trie(self):
        with self._swap_lock:
            if self._trie is None or self._trie_version != self.store.version:
                self._trie = build_trie(self.store)
                self._trie_version = self.store.version
            return self._trie

    # -- dispatch --------------------------------------------------------

    def dispatch(self, method: str, path: str, body: dict) -> dict:
        route = (method.upper(), path.rstrip("/") or "/")
        handler = _ROUTES.get(route)
        if handler is None:
            raise RequestError("not_found", f"no route {method} {path}", status=404)
        try:
            return handler(self, body)
        except RequestError:
            raise
        except MalformedAnnotation as exc:
            raise RequestError("malformed_annotation", str(exc)) from exc
        except CorruptSnapshot as exc:
            raise RequestError("corrupt_snapshot", str(exc)) from exc
        except FileNotFoundError as exc:
            raise RequestError("io_failure", str(exc), status=404) from exc
        except (ValueError, KeyError) as exc:
            raise RequestError("domain_error", str(exc)) from exc

    # -- endpoints ---------------------------------------------------------

    def ep_ingest(self, body: dict) -> dict:
        triplets = [_triplet_from(t) for t in body.get("triplets", [])]
        documents = body.get("documents", [])
        source_id = str(body.get("source_id", ""))
        with self._mutate_lock:
            n = self.store.ingest(triplets, source_id) if triplets else 0
            for doc_spec in documents:
                text = _require(doc_spec, "text")
                fmt = doc_spec.get("format", "token_form")
                doc = markup.parse_document(text, fmt)
                n += self.store.ingest(
                    markup.extract_triplets(doc), str(doc_spec.get("id", source_id))
                )
        return {"ingested": n}

    def ep_lookup(self, body: dict) -> dict:
        key = StoreKey.of(str(_require(body, "entity")), str(_require(body, "relation")))
        value = self.store.lookup_exact(key)
        if value is None:
            return {"outcome": "unknown"}
        return {"outcome": "hit", "value": value, "similarity": 1.0}

    def ep_retrieve(self, body: dict) -> dict:
        key = StoreKey.of(str(_require(body, "entity")), str(_require(body, "relation")))
        threshold = float(body.get("threshold", self.config.threshold))
        result = self.index().retrieve(key, threshold)
        if result.is_hit:
            assert result.matched_key is not None
            return {
                "outcome": "hit",
                "value": result.value,
                "similarity": round9(result.similarity),
                "matched_entity": result.matched_key.entity,
                "matched_relation": result.matched_key.relation,
            }
        payload: dict = {"outcome": "unknown"}
        if result.similarity != float("-inf"):
            payload["similarity"] = round9(result.similarity)
        return payload

    def ep_delete(self, body: dict) -> dict:
        selectors = {
            k: body[k]
            for k in ("by_key", "by_entity", "by_source", "by_triplets")
            if k in body
        }
        if len(selectors) != 1:
            raise RequestError("bad_request", "exactly one deletion selector required")
        with self._mutate_lock:
            if "by_entity" in selectors:
                deleted = self.store.delete_matching(by_entity=str(selectors["by_entity"]))
            elif "by_source" in selectors:
                deleted = self.store.delete_matching(by_source=str(selectors["by_source"]))
            elif "by_key" in selectors:
                spec = selectors["by_key"]
                deleted = self.store.delete_matching(
                    by_key=(str(_require(spec, "entity")), str(_require(spec, "relation")))
                )
            else:
                triplets = [_triplet_from(t) for t in selectors["by_triplets"]]
                deleted = self.store.delete_matching(by_triplet_list=triplets)
        return {"deleted": deleted}

    def ep_stats(self, _body: dict) -> dict:
        payload = self.store.stats().as_dict()
        payload["provider"] = {
            "name": self.provider.name,
            "dimension": self.provider.dimension,
            "version": self.provider.version,
        }
        payload["default_threshold"] = round9(self.config.threshold)
        return payload

    def ep_trie_next(self, body: dict) -> dict:
        prefix = [str(t) for t in body.get("prefix", [])]
        nxt, may_terminate = self.trie().allowed_next(prefix)
        return {"next": sorted(nxt), "may_terminate": may_terminate}

    def ep_mask(self, body: dict) -> dict:
        text = str(_require(body, "text"))
        fmt = str(body.get("format", "token_form"))
        doc = markup.parse_document(text, fmt, lenient=bool(body.get("lenient", False)))
        return {
            "tokens": doc.surfaces(),
            "categories": [t.category.value for t in doc.tokens],
            "mask": markup.compute_loss_mask(doc),
        }

    def ep_ppl(self, body: dict) -> dict:
        mode = str(_require(body, "mode"))
        rows = _require(body, "tokens")
        tokens = tuple(
            accounting.scored_token_from_dict(row, index=i) for i, row in enumerate(rows)
        )
        seq = accounting.ScoredSequence(
            tokens=tokens, mode="dynamic" if mode == "dynamic" else "static"
        )
        if mode in ("static", "dynamic"):
            value = accounting.ppl_over_original(seq)
        elif mode == "normalized":
            value = accounting.ppl_normalized(seq)
        else:
            raise RequestError("bad_request", f"unknown ppl mode: {mode}")
        return {"mode": mode, "ppl": round9(value)}

    def ep_generate(self, body: dict) -> dict:
        if "script" in body:
            spec = body["script"]
            lm = harness.ScriptedLm(spec.get("script", []), spec.get("vocab", []))
        elif "script_path" in body:
            lm = harness.load_scripted_lm(str(body["script_path"]))
        else:
            raise RequestError("bad_request", "a script or script_path is required")
        config = harness.GenerationConfig(
            max_tokens=int(body.get("max_tokens", 256)),
            query_mode=str(body.get("query_mode", "fuzzy")),
            retrieval_threshold=float(body.get("threshold", self.config.threshold)),
            fallback_text=str(body.get("fallback_text", "unknown")),
            repetition_penalty=float(body.get("repetition_penalty", 1.2)),
        )
        doc, seq, outcomes = harness.generate(
            lm,
            str(body.get("prompt", "")),
            store=self.store,
            index=self.index(),
            trie=self.trie(),
            config=config,
        )
        return {
            "text": markup.serialize(doc),
            "outcomes": [
                {
                    "call_index": o.call_index,
                    "entity": o.entity,
                    "relation": o.relation,
                    "success": o.success,
                    "value": o.value,
                    "similarity": None if o.similarity is None else round9(o.similarity),
                }
                for o in outcomes
            ],
            "tokens": [
                {
                    "surface": t.token.surface,
                    "category": t.token.category.value,
                    "logprob": t.logprob,
                    "mask": t.mask,
                }
                for t in seq.tokens
            ],
        }

    def ep_snapshot_save(self, body: dict) -> dict:
        path = str(_require(body, "path"))
        with self._mutate_lock:
            stats = self.store.save_snapshot(path)
        return {"saved": path, **stats.as_dict()}

    def ep_snapshot_load(self, body: dict) -> dict:
        path = str(_require(body, "path"))
        with self._mutate_lock:
            loaded = TripletStore.load_snapshot(path)
            with self._swap_lock:
                self.store = loaded
                self._index = None
                self._trie = None
        return {"loaded": path, **loaded.stats().as_dict()}


_ROUTES = {
    ("POST", "/ingest"): FactweaveService.ep_ingest,
    ("POST", "/lookup"): FactweaveService.ep_lookup,
    ("POST", "/retrieve"): FactweaveService.ep_retrieve,
    ("DELETE", "/triplets"): FactweaveService.ep_delete,
    ("GET", "/stats"): FactweaveService.ep_stats,
    ("POST", "/trie/next"): FactweaveService.ep_trie_next,
    ("POST", "/mask"): FactweaveService.ep_mask,
    ("POST", "/ppl"): FactweaveService.ep_ppl,
    ("POST", "/generate"): FactweaveService.ep_generate,
    ("POST", "/snapshot/save"): FactweaveService.ep_snapshot_save,
    ("POST", "/snapshot/load"): FactweaveService.ep_snapshot_load,
}


class _Handler(BaseHTTPRequestHandler):
    service: FactweaveService
    protocol_version = "HTTP/1.1"

    def log_message(self, *args):  # quiet by default
        pass

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length > self.service.config.max_request_bytes:
            raise RequestError("bad_request", "request too large", status=413)
        if length == 0:
            return {}
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RequestError("bad_request", f"invalid JSON body: {exc}") from exc
        if not isinstance(body, dict):
            raise RequestError("bad_request", "body must be a JSON object")
        return body

    def _respond(self, status: int, payload: dict) -> None:
        data = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _handle(self) -> None:
        try:
            body = self._read_body()
            payload = self.service.dispatch(self.command, self.path, body)
            self._respond(200, payload)
        except RequestError as exc:
            self._respond(
                exc.status, {"error": {"code": exc.code, "message": exc.message}}
            )
        except Exception as exc:  # pragma: no cover - last-resort guard
            self._respond(500, {"error": {"code": "internal", "message": str(exc)}})

    do_GET = _handle
    do_POST = _handle
    do_DELETE = _handle


def make_server(service: FactweaveService) -> ThreadingHTTPServer:
    host, _, port = service.config.addr.rpartition(":")
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host or "127.0.0.1", int(port)), handler)


def start_background(service: FactweaveService) -> tuple[ThreadingHTTPServer, threading.Thread]:
    """Run the server on a daemon thread; useful for tests and tooling."""
    server = make_server(service)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


def serve(config: ServiceConfig) -> None:
    """Run the service until interrupted."""
    service = FactweaveService.from_config(config)
    server = make_server(service)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
