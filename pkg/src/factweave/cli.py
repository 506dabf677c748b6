"""Command-line front end.

State lives in a snapshot file chosen with ``--snapshot`` (or the
FACTWEAVE_SNAPSHOT environment variable); commands that mutate the
store write the snapshot back.  ``--json`` switches every command to
machine-readable output on stdout.  Exit codes: 0 success, 1 domain
error, 2 usage error.
"""

from __future__ import annotations

import json
import os
import sys

import click

from . import __version__, accounting, harness, markup
from .markup import MalformedAnnotation
from .retrieval import DEFAULT_THRESHOLD, TrigramEmbeddingProvider, build_index
from .service import ENV_ADDR, ENV_SNAPSHOT, ENV_THRESHOLD, DEFAULT_ADDR, ServiceConfig, round9, serve
from .store import CorruptSnapshot, StoreKey, TripletStore
from .trie import build_trie

DOMAIN_ERRORS = (
    MalformedAnnotation,
    CorruptSnapshot,
    accounting.EmptyOriginal,
    accounting.UnknownOccurrenceId,
    harness.ProviderFailure,
    ValueError,
    OSError,
)


class State:
    def __init__(self, snapshot: str | None, as_json: bool):
        self.snapshot = snapshot
        self.as_json = as_json
        self._store: TripletStore | None = None

    @property
    def store(self) -> TripletStore:
        if self._store is None:
            if self.snapshot and os.path.exists(self.snapshot):
                self._store = TripletStore.load_snapshot(self.snapshot)
            else:
                self._store = TripletStore()
        return self._store

    def persist(self) -> None:
        if self.snapshot:
            self.store.save_snapshot(self.snapshot)

    def emit(self, payload: dict, human: str) -> None:
        if self.as_json:
            click.echo(json.dumps(payload, ensure_ascii=False))
        else:
            click.echo(human)


pass_state = click.make_pass_decorator(State)


def _domain_guard(func):
    """Map domain failures to exit code 1 with a diagnostic."""

    import functools

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except DOMAIN_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
@click.version_option(__version__)
@click.option(
    "--snapshot",
    envvar=ENV_SNAPSHOT,
    default=None,
    help="Store snapshot file backing this invocation.",
)
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.pass_context
def main(ctx, snapshot, as_json):
    """Knowledge-store, retrieval, masking and accounting toolkit."""
    ctx.obj = State(snapshot, as_json)


@main.command()
@click.argument("corpus", type=click.Path(exists=True))
@pass_state
@_domain_guard
def ingest(state: State, corpus):
    """Ingest triplets extracted from a JSONL corpus of documents."""
    total_docs = 0
    total_triplets = 0
    for record in markup.read_corpus(corpus):
        doc = markup.parse_document(record["text"], record["format"])
        total_triplets += state.store.ingest(
            markup.extract_triplets(doc), record["id"]
        )
        total_docs += 1
    state.persist()
    state.emit(
        {"documents": total_docs, "ingested": total_triplets},
        f"ingested {total_triplets} triplets from {total_docs} documents",
    )


@main.command()
@click.argument("entity")
@click.argument("relation")
@pass_state
@_domain_guard
def lookup(state: State, entity, relation):
    """Exact lookup of (ENTITY, RELATION)."""
    value = state.store.lookup_exact(StoreKey.of(entity, relation))
    if value is None:
        state.emit({"outcome": "unknown"}, "unknown")
    else:
        state.emit(
            {"outcome": "hit", "value": value, "similarity": 1.0}, value
        )


@main.command()
@click.argument("entity")
@click.argument("relation")
@click.option(
    "--threshold",
    type=float,
    envvar=ENV_THRESHOLD,
    default=DEFAULT_THRESHOLD,
    show_default=True,
)
@pass_state
@_domain_guard
def retrieve(state: State, entity, relation, threshold):
    """Fuzzy retrieve (ENTITY, RELATION) with cosine rejection."""
    index = build_index(state.store, TrigramEmbeddingProvider())
    result = index.retrieve(StoreKey.of(entity, relation), threshold)
    if result.is_hit:
        assert result.matched_key is not None
        state.emit(
            {
                "outcome": "hit",
                "value": result.value,
                "similarity": round9(result.similarity),
                "matched_entity": result.matched_key.entity,
                "matched_relation": result.matched_key.relation,
            },
            f"{result.value}  (similarity {result.similarity:.6f}"
            f" via {result.matched_key.entity} / {result.matched_key.relation})",
        )
    else:
        payload = {"outcome": "unknown"}
        human = "unknown"
        if result.similarity != float("-inf"):
            payload["similarity"] = round9(result.similarity)
            human = f"unknown  (best similarity {result.similarity:.6f})"
        state.emit(payload, human)


@main.command()
@click.option("--by-entity", default=None)
@click.option("--by-source", default=None)
@click.option("--by-key", nargs=2, default=None, metavar="ENTITY RELATION")
@pass_state
@_domain_guard
def delete(state: State, by_entity, by_source, by_key):
    """Delete matching triplets (unlearning)."""
    chosen = [s for s in (by_entity, by_source, by_key) if s]
    if len(chosen) != 1:
        raise click.UsageError("choose exactly one of --by-entity/--by-source/--by-key")
    if by_entity:
        deleted = state.store.delete_matching(by_entity=by_entity)
    elif by_source:
        deleted = state.store.delete_matching(by_source=by_source)
    else:
        deleted = state.store.delete_matching(by_key=tuple(by_key))
    state.persist()
    state.emit({"deleted": deleted}, f"deleted {deleted}")


@main.command()
@pass_state
@_domain_guard
def stats(state: State):
    """Store statistics."""
    s = state.store.stats()
    human = (
        f"triplets: {s.triplet_count}\n"
        f"unique entities: {s.unique_entity_count}\n"
        f"unique relations: {s.unique_relation_count}\n"
        f"unique values: {s.unique_value_count}"
    )
    state.emit(s.as_dict(), human)


def _read_doc_argument(doc: str, from_file: bool) -> str:
    if from_file:
        with open(doc, encoding="utf-8") as fh:
            return fh.read().strip("\n")
    return doc


@main.command()
@click.argument("doc")
@click.option("--format", "fmt", default="token_form", show_default=True,
              type=click.Choice(markup.CORPUS_FORMATS))
@click.option("--file", "from_file", is_flag=True, help="DOC is a file path.")
@pass_state
@_domain_guard
def mask(state: State, doc, fmt, from_file):
    """Loss mask for an annotated document."""
    parsed = markup.parse_document(_read_doc_argument(doc, from_file), fmt)
    mask_bits = markup.compute_loss_mask(parsed)
    payload = {
        "tokens": parsed.surfaces(),
        "categories": [t.category.value for t in parsed.tokens],
        "mask": mask_bits,
    }
    human = "\n".join(
        f"{m}  {t.surface}" for t, m in zip(parsed.tokens, mask_bits)
    )
    state.emit(payload, human)


@main.command()
@click.argument("doc")
@click.option("--format", "fmt", default="token_form", show_default=True,
              type=click.Choice(markup.CORPUS_FORMATS))
@click.option("--file", "from_file", is_flag=True, help="DOC is a file path.")
@pass_state
@_domain_guard
def strip(state: State, doc, fmt, from_file):
    """Recover the plain text of an annotated document."""
    parsed = markup.parse_document(_read_doc_argument(doc, from_file), fmt)
    text = markup.strip_annotations(parsed)
    state.emit({"text": text}, text)


@main.command()
@click.argument("doc")
@click.option("--to", "target", required=True, type=click.Choice(["inline", "token_form"]))
@click.option("--file", "from_file", is_flag=True, help="DOC is a file path.")
@pass_state
@_domain_guard
def convert(state: State, doc, target, from_file):
    """Convert a document between the two annotation syntaxes."""
    text = _read_doc_argument(doc, from_file)
    fmt = "token_form" if markup.DB_START in text else "inline"
    parsed = markup.parse_document(text, fmt)
    rendered = markup.serialize(parsed, target)
    state.emit({"text": rendered, "format": target}, rendered)


@main.command()
@click.argument("scored", type=click.Path(exists=True))
@click.option("--mode", required=True, type=click.Choice(["static", "dynamic", "normalized"]))
@pass_state
@_domain_guard
def ppl(state: State, scored, mode):
    """Perplexity over a scored-sequence JSONL file."""
    seq = accounting.read_scored_jsonl(
        scored, mode="dynamic" if mode == "dynamic" else "static"
    )
    if mode == "normalized":
        value = accounting.ppl_normalized(seq)
    else:
        value = accounting.ppl_over_original(seq)
    state.emit({"mode": mode, "ppl": round9(value)}, f"{value:.9g}")


@main.command(name="offload-rank")
@click.argument("deltas", type=click.Path(exists=True))
@click.option("--ratio", type=float, required=True)
@click.option("--report-dir", type=click.Path(), default=None,
              help="Also render the threshold ladder TSV and distribution figure.")
@pass_state
@_domain_guard
def offload_rank(state: State, deltas, ratio, report_dir):
    """Rank triplets by loss difference; keep the top RATIO fraction."""
    records = accounting.read_delta_jsonl(deltas)
    keep, threshold = accounting.rank_offload(records, ratio)
    payload = {
        "kept": sorted(keep, key=str),
        "kept_count": len(keep),
        "total": len(records),
        "threshold": threshold if threshold == float("inf") else round9(threshold),
    }
    if report_dir:
        from . import report  # defer matplotlib import to the report path

        paths = report.render_offload_report(records, report_dir)
        payload["report"] = {k: str(v) for k, v in paths.items()}
    state.emit(
        payload,
        f"kept {len(keep)}/{len(records)} at threshold {threshold:.6g}",
    )


@main.command(name="report")
@click.argument("deltas", type=click.Path(exists=True), required=False)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--store-stats", "with_store", is_flag=True,
              help="Also render the store statistics figure.")
@pass_state
@_domain_guard
def report_cmd(state: State, deltas, out_dir, with_store):
    """Render figures plus delimited output into OUT."""
    from . import report  # defer matplotlib import to the report path

    written: dict[str, str] = {}
    if deltas:
        records = accounting.read_delta_jsonl(deltas)
        for kind, path in report.render_offload_report(records, out_dir).items():
            written[f"offload_{kind}"] = str(path)
    if with_store:
        for kind, path in report.render_store_report(state.store.stats(), out_dir).items():
            written[f"store_{kind}"] = str(path)
    if not written:
        raise click.UsageError("nothing to report: pass DELTAS and/or --store-stats")
    state.emit(
        {"written": written},
        "\n".join(f"wrote {p}" for p in written.values()),
    )


@main.command()
@click.option("--script", "script_path", type=click.Path(exists=True), required=True,
              help="Scripted LM JSON file: {\"vocab\": [...], \"script\": [...]}.")
@click.option("--prompt", default="")
@click.option("--max-tokens", type=int, default=256, show_default=True)
@click.option("--mode", "query_mode", default="fuzzy", show_default=True,
              type=click.Choice(["fuzzy", "trie"]))
@click.option("--threshold", type=float, envvar=ENV_THRESHOLD, default=DEFAULT_THRESHOLD)
@pass_state
@_domain_guard
def generate(state: State, script_path, prompt, max_tokens, query_mode, threshold):
    """Generate with interleaved lookups using a scripted LM."""
    lm = harness.load_scripted_lm(script_path)
    config = harness.GenerationConfig(
        max_tokens=max_tokens, query_mode=query_mode, retrieval_threshold=threshold
    )
    doc, seq, outcomes = harness.generate(
        lm,
        prompt,
        store=state.store,
        index=build_index(state.store, TrigramEmbeddingProvider()),
        trie=build_trie(state.store),
        config=config,
    )
    text = markup.serialize(doc)
    payload = {
        "text": text,
        "outcomes": [
            {
                "entity": o.entity,
                "relation": o.relation,
                "success": o.success,
                "value": o.value,
            }
            for o in outcomes
        ],
    }
    lines = [text]
    for o in outcomes:
        status = "hit" if o.success else "miss"
        lines.append(f"[{status}] ({o.entity}, {o.relation}) -> {o.value}")
    state.emit(payload, "\n".join(lines))


@main.command(name="trie-next")
@click.argument("prefix", nargs=-1)
@pass_state
@_domain_guard
def trie_next(state: State, prefix):
    """Allowed next tokens after PREFIX in the query trie."""
    trie = build_trie(state.store)
    nxt, may_terminate = trie.allowed_next(list(prefix))
    state.emit(
        {"next": sorted(nxt), "may_terminate": may_terminate},
        " ".join(sorted(nxt)) + ("  [may terminate]" if may_terminate else ""),
    )


@main.group()
def snapshot():
    """Save or load store snapshots."""


@snapshot.command(name="save")
@click.argument("path", type=click.Path())
@pass_state
@_domain_guard
def snapshot_save(state: State, path):
    s = state.store.save_snapshot(path)
    state.emit({"saved": path, **s.as_dict()}, f"saved {s.triplet_count} triplets to {path}")


@snapshot.command(name="load")
@click.argument("path", type=click.Path(exists=True))
@pass_state
@_domain_guard
def snapshot_load(state: State, path):
    loaded = TripletStore.load_snapshot(path)
    state._store = loaded
    state.persist()
    s = loaded.stats()
    state.emit({"loaded": path, **s.as_dict()}, f"loaded {s.triplet_count} triplets from {path}")


@main.command(name="serve")
@click.option("--addr", envvar=ENV_ADDR, default=DEFAULT_ADDR, show_default=True)
@click.option("--empty", "allow_empty", is_flag=True,
              help="Start with an empty store when no snapshot exists.")
@click.option("--threshold", type=float, envvar=ENV_THRESHOLD, default=DEFAULT_THRESHOLD)
@pass_state
def serve_cmd(state: State, addr, allow_empty, threshold):
    """Run the HTTP service."""
    config = ServiceConfig(
        addr=addr,
        snapshot_path=state.snapshot,
        allow_empty=allow_empty,
        threshold=threshold,
    )
    try:
        click.echo(f"factweave service listening on {addr}", err=True)
        serve(config)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
