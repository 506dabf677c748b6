from __future__ import annotations

import json
import math

import pytest
from click.testing import CliRunner

from factweave.cli import main
from factweave.markup import DB_RETRIEVE, DB_START, SEP

NAPOLEON_TEXT = (
    "Napoleon was born on <|db_start|> Napoleon <|sep|> Birth_Date"
    " <|db_retrieve|> August 15, 1769 <|db_end|> August 15, 1769."
)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.jsonl"
    rows = [
        {"id": "doc1", "text": NAPOLEON_TEXT, "format": "token_form"},
        {
            "id": "doc2",
            "text": "x [dblookup('Ada', 'Known For') -> analytical engine] engine",
            "format": "inline",
        },
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path


@pytest.fixture
def snapshot_path(tmp_path, runner, corpus_file):
    snap = tmp_path / "db.tsv"
    result = runner.invoke(main, ["--snapshot", str(snap), "ingest", str(corpus_file)])
    assert result.exit_code == 0, result.output
    return snap


class TestStoreCommands:
    def test_stats_empty(self, runner):
        result = runner.invoke(main, ["--json", "stats"])
        assert result.exit_code == 0
        assert json.loads(result.output)["triplet_count"] == 0

    def test_ingest_and_lookup(self, runner, snapshot_path):
        result = runner.invoke(
            main,
            ["--snapshot", str(snapshot_path), "--json", "lookup", "Napoleon", "Birth_Date"],
        )
        assert result.exit_code == 0
        payload = json.loads(result.output)
        assert payload == {
            "outcome": "hit",
            "value": "August 15, 1769",
            "similarity": 1.0,
        }

    def test_retrieve(self, runner, snapshot_path):
        result = runner.invoke(
            main,
            [
                "--snapshot",
                str(snapshot_path),
                "--json",
                "retrieve",
                "Napoleon",
                "Birth_Date",
                "--threshold",
                "0.6",
            ],
        )
        payload = json.loads(result.output)
        assert payload["outcome"] == "hit"
        assert payload["similarity"] == 1.0

    def test_delete_by_entity(self, runner, snapshot_path):
        result = runner.invoke(
            main,
            ["--snapshot", str(snapshot_path), "--json", "delete", "--by-entity", "Napoleon"],
        )
        assert json.loads(result.output) == {"deleted": 1}
        after = runner.invoke(
            main,
            ["--snapshot", str(snapshot_path), "--json", "lookup", "Napoleon", "Birth_Date"],
        )
        assert json.loads(after.output) == {"outcome": "unknown"}

    def test_delete_requires_one_selector(self, runner):
        result = runner.invoke(main, ["delete"])
        assert result.exit_code == 2

    def test_snapshot_save_and_load(self, runner, snapshot_path, tmp_path):
        copy = tmp_path / "copy.tsv"
        save = runner.invoke(
            main, ["--snapshot", str(snapshot_path), "snapshot", "save", str(copy)]
        )
        assert save.exit_code == 0
        load = runner.invoke(main, ["--json", "snapshot", "load", str(copy)])
        assert json.loads(load.output)["triplet_count"] == 2

    def test_corrupt_snapshot_is_domain_error(self, runner, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("garbage\n")
        result = runner.invoke(main, ["snapshot", "load", str(bad)])
        assert result.exit_code == 1


class TestDocumentCommands:
    def test_mask(self, runner):
        result = runner.invoke(main, ["--json", "mask", NAPOLEON_TEXT])
        payload = json.loads(result.output)
        assert sum(1 - m for m in payload["mask"]) == 5

    def test_strip(self, runner):
        result = runner.invoke(main, ["strip", NAPOLEON_TEXT])
        assert result.output.strip() == "Napoleon was born on August 15, 1769."

    def test_convert_roundtrip(self, runner):
        inline = runner.invoke(main, ["convert", NAPOLEON_TEXT, "--to", "inline"])
        assert "[dblookup('Napoleon', 'Birth_Date')" in inline.output
        back = runner.invoke(
            main, ["convert", inline.output.strip(), "--to", "token_form"]
        )
        assert back.output.strip() == NAPOLEON_TEXT

    def test_malformed_doc_is_domain_error(self, runner):
        result = runner.invoke(main, ["mask", f"{DB_START} broken"])
        assert result.exit_code == 1
        assert "error" in result.stderr


class TestAccountingCommands:
    def test_ppl_normalized_fixture(self, runner, tmp_path):
        rows = [
            {"surface": "a", "category": "original", "logprob": -math.log(2), "mask": 1}
            for _ in range(4)
        ] + [
            {"surface": "e", "category": "entity", "logprob": -math.log(2), "mask": 1}
            for _ in range(2)
        ]
        path = tmp_path / "scored.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        result = runner.invoke(main, ["--json", "ppl", "--mode", "normalized", str(path)])
        payload = json.loads(result.output)
        assert abs(payload["ppl"] - 2.0**1.5) < 1e-5

    def test_ppl_static(self, runner, tmp_path):
        rows = [
            {"surface": "a", "category": "original", "logprob": -math.log(2), "mask": 1}
            for _ in range(4)
        ]
        path = tmp_path / "scored.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        result = runner.invoke(main, ["--json", "ppl", "--mode", "static", str(path)])
        assert abs(json.loads(result.output)["ppl"] - 2.0) < 1e-9

    def test_offload_rank(self, runner, tmp_path):
        path = tmp_path / "deltas.jsonl"
        rows = [
            {"triplet_id": "a", "delta": 3.0},
            {"triplet_id": "b", "delta": 1.0},
            {"triplet_id": "c", "delta": 0.5},
            {"triplet_id": "d", "delta": 0.1},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        result = runner.invoke(
            main, ["--json", "offload-rank", "--ratio", "0.5", str(path)]
        )
        payload = json.loads(result.output)
        assert payload["kept_count"] == 2
        assert set(payload["kept"]) == {"a", "b"}
        assert payload["threshold"] == 1.0

    def test_report_renders_files(self, runner, tmp_path):
        path = tmp_path / "deltas.jsonl"
        path.write_text(
            "\n".join(
                json.dumps({"triplet_id": i, "delta": (i % 17) / 4.0})
                for i in range(200)
            )
            + "\n"
        )
        out = tmp_path / "report"
        result = runner.invoke(
            main, ["--json", "report", str(path), "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        written = json.loads(result.output)["written"]
        assert (out / "offload_thresholds.tsv").exists()
        assert (out / "delta_loss_distribution.png").exists()
        header, *rows = (out / "offload_thresholds.tsv").read_text().splitlines()
        assert header == "ratio\tthreshold\tkept\ttotal"
        thresholds = [float(r.split("\t")[1]) for r in rows]
        assert thresholds == sorted(thresholds, reverse=True)
        assert written


class TestGenerateCommand:
    def test_scripted_generation(self, runner, snapshot_path, tmp_path):
        lm = {
            "vocab": [],
            "script": [
                "Napoleon",
                "was",
                "born",
                "on",
                DB_START,
                "Napoleon",
                SEP,
                "Birth_Date",
                DB_RETRIEVE,
            ],
        }
        lm_path = tmp_path / "lm.json"
        lm_path.write_text(json.dumps(lm))
        result = runner.invoke(
            main,
            [
                "--snapshot",
                str(snapshot_path),
                "--json",
                "generate",
                "--script",
                str(lm_path),
                "--prompt",
                "",
            ],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert "August 15, 1769" in payload["text"]
        assert payload["outcomes"][0]["success"] is True


class TestExitCodes:
    def test_usage_error_is_2(self, runner):
        assert runner.invoke(main, ["lookup"]).exit_code == 2

    def test_unknown_command_is_2(self, runner):
        assert runner.invoke(main, ["frobnicate"]).exit_code == 2
