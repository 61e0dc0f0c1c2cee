"""Document ingestion and overlapping word-window chunking.

Documents from each named corpus are whitespace-tokenized (title prepended to
body) and cut into windows of ``chunk_size`` words advancing by
``chunk_size - overlap`` words, so consecutive chunks of a document share
exactly ``overlap`` words. A trailing window that would add no new words is
not emitted. Inter-word spacing inside chunk text is normalized to single
spaces.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import InvalidConfigError

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 128
DEFAULT_OVERLAP = 32


@dataclass(frozen=True)
class SourceDocument:
    corpus_name: str
    doc_id: str
    title: str
    body: str


@dataclass(frozen=True)
class Chunk:
    corpus_name: str
    doc_id: str
    chunk_index: int
    word_offset: int
    text: str
    word_count: int


@dataclass(frozen=True)
class CorpusEntry:
    document_count: int
    chunk_count: int
    index_bytes: int


@dataclass(frozen=True)
class CorpusStats:
    per_corpus: dict[str, CorpusEntry]

    def to_dict(self) -> dict:
        return {
            name: {
                "document_count": entry.document_count,
                "chunk_count": entry.chunk_count,
                "index_bytes": entry.index_bytes,
            }
            for name, entry in sorted(self.per_corpus.items())
        }


def chunk_document(
    doc: SourceDocument,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
) -> list[Chunk]:
    """Cut one document into overlapping word windows.

    Words are maximal runs of non-whitespace in ``title + " " + body``. Chunks
    start at offsets 0, stride, 2*stride, ... with stride = chunk_size -
    overlap; a final window that is fully contained in the previous one is
    suppressed, so every chunk contributes at least one new word.
    """
    if chunk_size <= 0 or overlap < 0 or overlap >= chunk_size:
        raise InvalidConfigError(
            f"need 0 <= overlap < chunk_size, got chunk_size={chunk_size} overlap={overlap}"
        )
    words = f"{doc.title} {doc.body}".split()
    if not words:
        raise InvalidConfigError(f"document {doc.doc_id!r} has no words")

    stride = chunk_size - overlap
    chunks: list[Chunk] = []
    for offset in range(0, len(words), stride):
        if offset > 0 and len(words) <= offset + overlap:
            break  # window would only repeat words from the previous chunk
        window = words[offset : offset + chunk_size]
        chunks.append(
            Chunk(
                corpus_name=doc.corpus_name,
                doc_id=doc.doc_id,
                chunk_index=len(chunks),
                word_offset=offset,
                text=" ".join(window),
                word_count=len(window),
            )
        )
    return chunks


def document_from_record(record: dict, corpus_name: str) -> SourceDocument:
    """Build a document from a JSONL record; raises KeyError on missing fields."""
    return SourceDocument(
        corpus_name=corpus_name,
        doc_id=str(record["doc_id"]),
        title=str(record.get("title", "")),
        body=str(record["body"]),
    )


def ingest(
    path,
    corpus_name: str,
    diagnostics: list[str] | None = None,
) -> Iterator[SourceDocument]:
    """Stream documents from a JSONL file of ``{doc_id, title?, body}`` records.

    Malformed lines and records with missing fields or an empty body are
    skipped; each skip is appended to ``diagnostics`` (when given) and logged.
    Header records (``{"kind": "header", ...}``) are skipped silently.
    """

    def report(message: str) -> None:
        if diagnostics is not None:
            diagnostics.append(message)
        logger.warning("%s: %s", path, message)

    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                report(f"line {line_number}: malformed record ({exc.msg})")
                continue
            if not isinstance(record, dict):
                report(f"line {line_number}: malformed record (not an object)")
                continue
            if record.get("kind") == "header":
                continue
            missing = [key for key in ("doc_id", "body") if key not in record]
            if missing:
                report(f"line {line_number}: missing field {', '.join(missing)}")
                continue
            doc = document_from_record(record, corpus_name)
            if not doc.body.strip():
                report(f"line {line_number}: empty body, skipped")
                continue
            yield doc


def corpus_stats(chunks: Iterable[Chunk]) -> CorpusStats:
    """Exact per-corpus document/chunk counts plus indexed text size in bytes."""
    docs: dict[str, set[str]] = {}
    counts: dict[str, int] = {}
    sizes: dict[str, int] = {}
    for chunk in chunks:
        docs.setdefault(chunk.corpus_name, set()).add(chunk.doc_id)
        counts[chunk.corpus_name] = counts.get(chunk.corpus_name, 0) + 1
        sizes[chunk.corpus_name] = sizes.get(chunk.corpus_name, 0) + len(
            chunk.text.encode("utf-8")
        )
    return CorpusStats(
        {
            name: CorpusEntry(len(docs[name]), counts[name], sizes[name])
            for name in counts
        }
    )


def chunk_to_record(chunk: Chunk) -> dict:
    return {
        "corpus": chunk.corpus_name,
        "doc_id": chunk.doc_id,
        "chunk_index": chunk.chunk_index,
        "word_offset": chunk.word_offset,
        "text": chunk.text,
    }


def chunk_from_record(record: dict) -> Chunk:
    text = str(record["text"])
    return Chunk(
        corpus_name=str(record["corpus"]),
        doc_id=str(record["doc_id"]),
        chunk_index=int(record["chunk_index"]),
        word_offset=int(record["word_offset"]),
        text=text,
        word_count=len(text.split()),
    )
