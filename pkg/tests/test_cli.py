"""CLI tests: subcommand contracts, exit codes, and pipeline determinism."""

from __future__ import annotations

import json
import os
from pathlib import Path

from pipeline_fixtures import run_pipeline, write_pipeline_fixture
from reflectrag.backend import response_to_wire, script_response
from reflectrag.cli import main
from reflectrag.prompts import render_critic_prompt
from reflectrag.scoring import TokenDistribution
from reflectrag.tokens import parse_stream


def test_chunk_and_stats_fixture(tmp_path, capsys):
    body = " ".join(f"w{i}" for i in range(300))
    docs = tmp_path / "docs.jsonl"
    docs.write_text(json.dumps({"doc_id": "d300", "body": body}) + "\n", encoding="utf-8")
    chunks = tmp_path / "chunks.jsonl"

    assert main(["chunk", "--in", str(docs), "--corpus", "pubmed", "--out", str(chunks)]) == 0
    lines = chunks.read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    assert header["kind"] == "header"
    assert header["config"]["chunk"] == {"size": 128, "overlap": 32}
    records = [json.loads(line) for line in lines[1:]]
    assert [r["word_offset"] for r in records] == [0, 96, 192]

    assert main(["stats", "--chunks", str(chunks)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["pubmed"]["document_count"] == 1
    assert payload["pubmed"]["chunk_count"] == 3


def test_usage_errors_exit_1(capsys):
    assert main(["stats", "--nope"]) == 1
    assert main(["definitely-not-a-command"]) == 1
    assert main([]) == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_data_errors_exit_2(tmp_path):
    assert main(["stats", "--chunks", str(tmp_path / "missing.jsonl")]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n", encoding="utf-8")
    assert main(["stats", "--chunks", str(bad)]) == 2


def _build_indices(tmp_path: Path, index_dir: Path) -> None:
    index_dir.mkdir(exist_ok=True)
    for corpus in ("textbook", "pubmed"):
        assert main(["chunk", "--in", str(tmp_path / f"docs_{corpus}.jsonl"),
                     "--corpus", corpus,
                     "--out", str(tmp_path / f"chunks_{corpus}.jsonl")]) == 0
        assert main(["index", "--corpus", corpus,
                     "--in", str(tmp_path / f"chunks_{corpus}.jsonl"),
                     "--out", str(index_dir / f"{corpus}.idx")]) == 0


def test_retrieve_outputs_ranked_results(tmp_path, capsys):
    write_pipeline_fixture(tmp_path)
    _build_indices(tmp_path, tmp_path / "indices")

    assert main(["retrieve", "--index", str(tmp_path / "indices" / "textbook.idx"),
                 "--index", str(tmp_path / "indices" / "pubmed.idx"),
                 "--query", "polycystic ovarian syndrome glucose tolerance",
                 "--k-final", "2"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert len(payload["results"]) == 2
    assert payload["results"][0]["corpus"] == "textbook"
    scores = [r["rerank_score"] for r in payload["results"]]
    assert scores == sorted(scores, reverse=True)
    assert payload["config"]["retrieval"]["k_final"] == 2


def test_infer_and_evaluate_end_to_end(tmp_path):
    write_pipeline_fixture(tmp_path)
    run_pipeline(tmp_path, figures=True)

    trace_records = [
        json.loads(line)
        for line in (tmp_path / "traces.jsonl").read_text(encoding="utf-8").splitlines()
    ]
    header, traces = trace_records[0], trace_records[1:]
    assert header["kind"] == "header"
    assert header["config"]["scoring"]["delta"] == 0.2

    by_id = {t["id"]: t for t in traces}
    pcos = by_id["q-pcos"]
    assert pcos["gate_decision"] == "Retrieve"
    chosen = pcos["segments"][0]["candidates"][pcos["chosen"]]
    assert chosen["evidence"]["corpus"] == "textbook"
    assert "PCOS" in chosen["evidence"]["text"]
    assert "Option C" in pcos["final_text"]
    heart = by_id["q-heart"]
    assert heart["gate_decision"] == "NoRetrieve"
    assert heart["segments"][0]["candidates"][0]["evidence"] is None

    report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert report["accuracy"] == 1.0
    assert report["retrieve_fraction"] == 0.5
    assert report["corpus_usage"] == {"textbook": 1.0}
    assert report["stratified_accuracy"] == {"retrieved": 1.0, "not_retrieved": 1.0}

    csv_lines = (tmp_path / "per_item.csv").read_text(encoding="utf-8").splitlines()
    assert csv_lines[0].startswith("id,gate_decision,predicted,gold,correct")
    assert len(csv_lines) == 3

    figures = sorted(p.name for p in (tmp_path / "figures").glob("*.png"))
    assert figures == ["accuracy_by_gate.png", "corpus_usage.png"]
    for name in figures:
        data = (tmp_path / "figures" / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert len(data) > 1000


def test_pipeline_is_byte_identical_across_runs(tmp_path):
    first_root = tmp_path / "run1"
    second_root = tmp_path / "run2"
    write_pipeline_fixture(first_root)
    write_pipeline_fixture(second_root)
    cwd = os.getcwd()
    try:
        os.chdir(first_root)
        first = run_pipeline(Path("."), seed=7)
        os.chdir(cwd)
        os.chdir(second_root)
        second = run_pipeline(Path("."), seed=7)
    finally:
        os.chdir(cwd)
    assert set(first) == set(second)
    for name in first:
        assert first[name] == second[name], f"{name} differs between runs"


def test_infer_unreachable_backend_exits_3(tmp_path):
    write_pipeline_fixture(tmp_path)
    _build_indices(tmp_path, tmp_path / "indices")
    config = tmp_path / "cfg.json"
    config.write_text(
        json.dumps({"backend": {"url": "http://127.0.0.1:9", "timeout_ms": 200,
                                "max_retries": 0}}),
        encoding="utf-8",
    )
    code = main(["infer", "--queries", str(tmp_path / "queries.jsonl"),
                 "--index-dir", str(tmp_path / "indices"), "--config", str(config),
                 "--out", str(tmp_path / "traces.jsonl")])
    assert code == 3


def _critic_script_record(reply: str) -> dict:
    dists = [TokenDistribution(tok.kind, {tok.value: 1.0})
             for tok in parse_stream(reply).tokens()]
    return response_to_wire(script_response(reply, dists))


def test_annotate_filter_export_cli(tmp_path, capsys):
    fixture = write_pipeline_fixture(tmp_path)
    _build_indices(tmp_path, tmp_path / "indices")

    instances = [
        {"id": "i1", "source": "ours", "instruction": "define the cardiac cycle",
         "input": "", "output": "it is the sequence of one heartbeat."},
        {"id": "i2", "source": "ours",
         "instruction": "summarize polycystic ovarian syndrome (PCOS) presentation",
         "input": "", "output": "irregular cycles, acne, and facial hair are typical."},
        {"id": "i3", "source": "ours", "instruction": "continue the previous note",
         "input": "", "output": "this one should be dropped."},
    ]
    (tmp_path / "instances.jsonl").write_text(
        "\n".join(json.dumps(i) for i in instances) + "\n", encoding="utf-8"
    )

    exact = {}
    exact[render_critic_prompt("retrieval", instances[0]["instruction"], "",
                               output=instances[0]["output"])] = \
        _critic_script_record("[No Retrieval]")
    exact[render_critic_prompt("utility", instances[0]["instruction"], "",
                               output=instances[0]["output"])] = \
        _critic_script_record("[Utility:5]")
    exact[render_critic_prompt("retrieval", instances[1]["instruction"], "",
                               output=instances[1]["output"])] = \
        _critic_script_record("[Retrieval]")
    exact[render_critic_prompt("relevance", instances[1]["instruction"], "",
                               evidence=fixture["tb_chunk"])] = \
        _critic_script_record("[Relevant]")
    exact[render_critic_prompt("support", instances[1]["instruction"], "",
                               evidence=fixture["tb_chunk"],
                               output=instances[1]["output"])] = \
        _critic_script_record("[Fully supported]")
    exact[render_critic_prompt("utility", instances[1]["instruction"], "",
                               output=instances[1]["output"])] = \
        _critic_script_record("[Utility:4]")
    exact[render_critic_prompt("retrieval", instances[2]["instruction"], "",
                               output=instances[2]["output"])] = \
        _critic_script_record("[Continue Generation]")
    exact[render_critic_prompt("utility", instances[2]["instruction"], "",
                               output=instances[2]["output"])] = \
        _critic_script_record("[Utility:3]")
    (tmp_path / "critic_mock.json").write_text(
        json.dumps({"role": "Critic", "exact": exact}), encoding="utf-8"
    )

    assert main(["annotate", "--instances", str(tmp_path / "instances.jsonl"),
                 "--backend", f"mock:{tmp_path / 'critic_mock.json'}",
                 "--index-dir", str(tmp_path / "indices"),
                 "--out", str(tmp_path / "annotated.jsonl")]) == 0

    assert main(["filter", "--in", str(tmp_path / "annotated.jsonl"),
                 "--out", str(tmp_path / "kept.jsonl"),
                 "--report", str(tmp_path / "filter_report.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["kept"] == 2
    assert report["dropped"] == 1
    assert report["reasons"] == {"continue-at-start": 1}
    assert json.loads((tmp_path / "filter_report.json").read_text()) == report

    assert main(["export", "--in", str(tmp_path / "kept.jsonl"),
                 "--out", str(tmp_path / "training.jsonl")]) == 0
    lines = (tmp_path / "training.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    for line in lines:
        record = json.loads(line)
        assert set(record) == {"id", "instruction", "input", "text"}
        assert parse_stream(record["text"]).diagnostics == ()
    retrieval_record = json.loads(lines[1])
    assert retrieval_record["text"].startswith("[Retrieval] <paragraph>")
