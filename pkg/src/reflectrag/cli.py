"""Command-line interface covering the pipeline end to end.

Subcommands: ``chunk``, ``index``, ``retrieve``, ``infer``, ``annotate``,
``filter``, ``export``, ``evaluate``, ``stats``. Exit codes: 0 success,
1 usage error, 2 data error, 3 backend/transport error. Data goes to files or
standard output; diagnostics go to standard error.

JSONL artifacts written by the CLI start with a header record
``{"kind": "header", "config": {...}}`` echoing the effective configuration;
readers skip such records. Training exports carry no header because their
byte layout is part of the training-data contract. A backend given as
``mock:PATH`` is a scripted mock loaded from a JSON file; anything else is
treated as an HTTP base URL (bearer token from ``SELFRAG_BACKEND_TOKEN``).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import __version__
from .annotate import (
    annotate_all,
    annotated_from_record,
    annotated_to_record,
    export_training,
    filter_annotated,
    instance_from_record,
    sample_for_critic,
)
from .backend import BackendRole, http_backend, load_mock_script
from .config import EngineConfig
from .corpus import (
    chunk_document,
    chunk_from_record,
    chunk_to_record,
    corpus_stats,
    ingest,
)
from .errors import BackendError, EngineError, InvalidConfigError
from .evaluation import GoldRecord, analyze_traces, knn_fewshot
from .figures import render_report_figures
from .inference import Query, run_batch, trace_from_record, trace_to_record
from .retriever import (
    CosineReranker,
    HashedBagEmbedder,
    RetrievalContext,
    build_index,
    load_index,
    retrieve_multi,
    save_index,
)

BACKEND_TOKEN_ENV = "SELFRAG_BACKEND_TOKEN"

_BACKEND_ERROR_KINDS = {
    "BackendError",
    "UnscriptedPromptError",
    "BackendTimeoutError",
    "TransportError",
    "ProtocolViolationError",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


def _read_jsonl(path):
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EngineError(f"{path}:{line_number}: malformed JSON ({exc.msg})")
            if isinstance(record, dict) and record.get("kind") == "header":
                continue
            records.append(record)
    return records


def _write_jsonl(path, records, config: EngineConfig | None = None) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        if config is not None:
            header = {"kind": "header", "config": config.to_dict()}
            handle.write(json.dumps(header, ensure_ascii=False) + "\n")
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def _load_config(args) -> EngineConfig:
    config = EngineConfig.load(args.config) if getattr(args, "config", None) else EngineConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "backend", None):
        overrides["backend__url"] = args.backend
    if getattr(args, "k_per_source", None) is not None:
        overrides["retrieval__k_per_source"] = args.k_per_source
    if getattr(args, "k_final", None) is not None:
        overrides["retrieval__k_final"] = args.k_final
    if getattr(args, "chunk_size", None) is not None:
        overrides["chunk__size"] = args.chunk_size
    if getattr(args, "overlap", None) is not None:
        overrides["chunk__overlap"] = args.overlap
    return config.with_overrides(**overrides)


def _resolve_backend(config: EngineConfig, role: BackendRole):
    url = config.backend.url
    if not url:
        raise InvalidConfigError("no backend url configured (flag --backend or config)")
    if url.startswith("mock:"):
        return load_mock_script(url[len("mock:"):], role=role)
    return http_backend(
        url,
        timeout_ms=config.backend.timeout_ms,
        max_retries=config.backend.max_retries,
        role=role,
        bearer_token=os.environ.get(BACKEND_TOKEN_ENV),
    )


def _load_indices(index_dir):
    paths = sorted(Path(index_dir).glob("*.idx"))
    if not paths:
        raise EngineError(f"no .idx files found in {index_dir}")
    return tuple(load_index(path) for path in paths)


def _retrieval_context(index_dir) -> RetrievalContext:
    indices = _load_indices(index_dir)
    embedder = HashedBagEmbedder(dim=indices[0].dim)
    for index in indices:
        if index.dim != embedder.dim:
            raise EngineError(f"index {index.corpus_name} has dim {index.dim}, expected {embedder.dim}")
    return RetrievalContext(indices, embedder, CosineReranker(embedder))


def _cmd_chunk(args) -> int:
    config = _load_config(args)
    diagnostics: list[str] = []
    records = []
    for doc in ingest(args.in_path, args.corpus, diagnostics):
        for chunk in chunk_document(doc, config.chunk.size, config.chunk.overlap):
            records.append(chunk_to_record(chunk))
    _write_jsonl(args.out, records, config)
    for message in diagnostics:
        print(f"chunk: {message}", file=sys.stderr)
    print(f"chunk: wrote {len(records)} chunks to {args.out}", file=sys.stderr)
    return 0


def _cmd_index(args) -> int:
    records = _read_jsonl(args.in_path)
    chunks = [
        chunk_from_record(record)
        for record in records
        if record.get("corpus") == args.corpus
    ]
    if not chunks:
        raise EngineError(f"no chunks for corpus {args.corpus!r} in {args.in_path}")
    embedder = HashedBagEmbedder(dim=args.dim)
    index = build_index(chunks, embedder)
    save_index(index, args.out)
    print(f"index: wrote {len(index)} vectors to {args.out}", file=sys.stderr)
    return 0


def _cmd_retrieve(args) -> int:
    config = _load_config(args)
    indices = tuple(load_index(path) for path in args.index)
    embedder = HashedBagEmbedder(dim=indices[0].dim)
    evidences = retrieve_multi(
        indices, args.query, config.retrieval, embedder, CosineReranker(embedder)
    )
    payload = {
        "config": config.to_dict(),
        "query": args.query,
        "results": [
            {
                **chunk_to_record(e.chunk),
                "retrieval_score": e.retrieval_score,
                "rerank_score": e.rerank_score,
            }
            for e in evidences
        ],
    }
    text = json.dumps(payload, ensure_ascii=False, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _query_from_record(record: dict) -> Query:
    return Query(
        instruction=str(record["instruction"]),
        input=str(record.get("input", "")),
        fewshot=tuple(tuple(shot) for shot in record.get("fewshot", [])),
        id=str(record.get("id", "")),
    )


def _cmd_infer(args) -> int:
    config = _load_config(args)
    context = _retrieval_context(args.index_dir)
    backend = _resolve_backend(config, BackendRole.GENERATOR)
    queries = [_query_from_record(record) for record in _read_jsonl(args.queries)]

    if args.fewshot_pool:
        pool = [instance_from_record(r) for r in _read_jsonl(args.fewshot_pool)]
        shots = args.shots if args.shots is not None else 3
        queries = [
            Query(
                instruction=query.instruction,
                input=query.input,
                id=query.id,
                fewshot=tuple(
                    (inst.instruction, inst.input, inst.output)
                    for inst in knn_fewshot(query.retrieval_text, pool, shots, context.embedder)
                ),
            )
            for query in queries
        ]

    traces = run_batch(
        queries,
        backend,
        context,
        config.scoring,
        config.retrieval,
        max_inflight=config.backend.max_inflight,
    )
    _write_jsonl(args.out, (trace_to_record(t) for t in traces), config)

    failed = [t for t in traces if t.error is not None]
    for trace in failed:
        print(f"infer: {trace.query.id or '<anon>'}: {trace.error}", file=sys.stderr)
    print(
        f"infer: wrote {len(traces)} traces to {args.out} ({len(failed)} failed)",
        file=sys.stderr,
    )
    if any(t.error_kind in _BACKEND_ERROR_KINDS for t in failed):
        return 3
    if failed:
        return 2
    return 0


def _cmd_annotate(args) -> int:
    config = _load_config(args)
    context = _retrieval_context(args.index_dir)
    critic = _resolve_backend(config, BackendRole.CRITIC)
    instances = [instance_from_record(r) for r in _read_jsonl(args.instances)]
    if args.sample is not None:
        instances = sample_for_critic(instances, args.sample, config.seed)
    annotated = annotate_all(instances, critic, context, config.retrieval)
    _write_jsonl(args.out, (annotated_to_record(a) for a in annotated), config)
    flagged = sum(1 for a in annotated if a.flags)
    print(
        f"annotate: wrote {len(annotated)} instances to {args.out} ({flagged} flagged)",
        file=sys.stderr,
    )
    return 0


def _cmd_filter(args) -> int:
    config = _load_config(args)
    annotated = [annotated_from_record(r) for r in _read_jsonl(args.in_path)]
    kept, report = filter_annotated(annotated)
    _write_jsonl(args.out, (annotated_to_record(a) for a in kept), config)
    text = json.dumps(report.to_dict(), indent=2)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    return 0


def _cmd_export(args) -> int:
    annotated = [annotated_from_record(r) for r in _read_jsonl(args.in_path)]
    export_training(annotated, args.out)
    print(f"export: wrote {len(annotated)} records to {args.out}", file=sys.stderr)
    return 0


def _cmd_evaluate(args) -> int:
    config = _load_config(args)
    traces = [trace_from_record(r) for r in _read_jsonl(args.traces)]
    gold = [GoldRecord.from_record(r) for r in _read_jsonl(args.gold)]
    report = analyze_traces(traces, gold)
    payload = {"config": config.to_dict(), **report.to_dict()}
    Path(args.out).write_text(
        json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    print(f"evaluate: wrote report to {args.out}", file=sys.stderr)

    if args.per_item_csv:
        fields = ["id", "gate_decision", "predicted", "gold", "correct", "final_text"]
        with open(args.per_item_csv, "w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            for record in payload["items"]:
                writer.writerow({field: record.get(field) for field in fields})
        print(f"evaluate: wrote per-item table to {args.per_item_csv}", file=sys.stderr)

    if args.figures_dir:
        created = render_report_figures(payload, args.figures_dir)
        for path in created:
            print(f"evaluate: wrote figure {path}", file=sys.stderr)
    return 0


def _cmd_stats(args) -> int:
    chunks = [chunk_from_record(r) for r in _read_jsonl(args.chunks)]
    print(json.dumps(corpus_stats(chunks).to_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reflectrag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    chunk = sub.add_parser("chunk", help="split documents into overlapping word windows")
    chunk.add_argument("--in", dest="in_path", required=True, help="documents JSONL")
    chunk.add_argument("--corpus", required=True, help="corpus name for provenance")
    chunk.add_argument("--out", required=True, help="chunks JSONL to write")
    chunk.add_argument("--chunk-size", type=int)
    chunk.add_argument("--overlap", type=int)
    chunk.add_argument("--config")
    chunk.add_argument("--seed", type=int)
    chunk.set_defaults(func=_cmd_chunk)

    index = sub.add_parser("index", help="embed chunks of one corpus into an index file")
    index.add_argument("--corpus", required=True)
    index.add_argument("--in", dest="in_path", required=True, help="chunks JSONL")
    index.add_argument("--out", required=True, help="index file to write")
    index.add_argument("--dim", type=int, default=256)
    index.set_defaults(func=_cmd_index)

    retrieve = sub.add_parser("retrieve", help="query indices and rerank the pooled hits")
    retrieve.add_argument("--index", action="append", required=True,
                          help="index file (repeatable)")
    retrieve.add_argument("--query", required=True)
    retrieve.add_argument("--k-per-source", type=int)
    retrieve.add_argument("--k-final", type=int)
    retrieve.add_argument("--config")
    retrieve.add_argument("--out")
    retrieve.set_defaults(func=_cmd_retrieve)

    infer = sub.add_parser("infer", help="run gated inference over queries")
    infer.add_argument("--queries", required=True, help="queries JSONL")
    infer.add_argument("--index-dir", required=True, help="directory of .idx files")
    infer.add_argument("--backend", help="http://... or mock:script.json")
    infer.add_argument("--config")
    infer.add_argument("--out", required=True, help="traces JSONL to write")
    infer.add_argument("--fewshot-pool", help="instruction JSONL for kNN shots")
    infer.add_argument("--shots", type=int, help="shots per query (default 3 with a pool)")
    infer.add_argument("--seed", type=int)
    infer.set_defaults(func=_cmd_infer)

    annotate = sub.add_parser("annotate", help="annotate instruction data with a critic")
    annotate.add_argument("--instances", required=True, help="instruction JSONL")
    annotate.add_argument("--backend", help="http://... or mock:script.json")
    annotate.add_argument("--index-dir", required=True)
    annotate.add_argument("--out", required=True, help="annotated JSONL to write")
    annotate.add_argument("--sample", type=int, help="annotate a seeded sample of N")
    annotate.add_argument("--seed", type=int)
    annotate.add_argument("--config")
    annotate.set_defaults(func=_cmd_annotate)

    filter_ = sub.add_parser("filter", help="drop malformed annotated instances")
    filter_.add_argument("--in", dest="in_path", required=True, help="annotated JSONL")
    filter_.add_argument("--out", required=True, help="kept JSONL to write")
    filter_.add_argument("--report", help="also write the report JSON here")
    filter_.add_argument("--config")
    filter_.set_defaults(func=_cmd_filter)

    export = sub.add_parser("export", help="write kept instances as training records")
    export.add_argument("--in", dest="in_path", required=True, help="kept JSONL")
    export.add_argument("--out", required=True, help="training JSONL to write")
    export.set_defaults(func=_cmd_export)

    evaluate = sub.add_parser("evaluate", help="score traces against gold records")
    evaluate.add_argument("--traces", required=True)
    evaluate.add_argument("--gold", required=True)
    evaluate.add_argument("--out", required=True, help="report JSON to write")
    evaluate.add_argument("--figures-dir", help="also render charts into this directory")
    evaluate.add_argument("--per-item-csv", help="also write a per-item CSV table")
    evaluate.add_argument("--config")
    evaluate.set_defaults(func=_cmd_evaluate)

    stats = sub.add_parser("stats", help="per-corpus document/chunk statistics")
    stats.add_argument("--chunks", required=True, help="chunks JSONL")
    stats.set_defaults(func=_cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"reflectrag: backend error: {exc}", file=sys.stderr)
        return 3
    except (EngineError, OSError, ValueError, KeyError) as exc:
        print(f"reflectrag: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
