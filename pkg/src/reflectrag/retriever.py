"""Embedding retrieval over chunked corpora with a reranking stage.

Per-source indices hold one vector per chunk. A query is answered by cosine
top-k over each source, pooling the per-source candidates, scoring the pool
with a reranker, and keeping the highest-rescored k. Ordering is fully
deterministic: score descending, then (doc_id, chunk_index, corpus) ascending.

The built-in embedder is a hashed bag-of-words model (lowercase, whitespace
split, FNV-1a 64-bit token hash modulo the dimension, L2-normalized term
frequencies). It is deterministic and dependency-free so golden tests are
portable; real deployments plug their own Embedder/Reranker implementations.

Index file layout (version ``SBRIDX1``): a UTF-8 JSON header line
``{"magic": "SBRIDX1", "corpus": str, "dim": int, "count": int}`` followed by
``count`` entries, each a JSON chunk-record line (corpus, doc_id, chunk_index,
word_offset, text) immediately followed by ``dim`` little-endian 32-bit
floats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .corpus import Chunk, chunk_from_record, chunk_to_record
from .errors import DimensionMismatchError, EmptyCorpusError, InvalidConfigError

INDEX_MAGIC = "SBRIDX1"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """FNV-1a 64-bit hash."""
    value = _FNV_OFFSET
    for byte in data:
        value ^= byte
        value = (value * _FNV_PRIME) & _FNV_MASK
    return value


class Embedder(Protocol):
    """Deterministic text-to-vector mapping with a fixed dimension."""

    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class Reranker(Protocol):
    """Deterministic, finite query/passage relevance score."""

    def score(self, query: str, passage: str) -> float: ...


class HashedBagEmbedder:
    """Hashed bag-of-words term-frequency embedder, L2-normalized."""

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise InvalidConfigError("embedder dimension must be >= 1")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dim, dtype=np.float64)
        for word in text.lower().split():
            vector[fnv1a_64(word.encode("utf-8")) % self.dim] += 1.0
        norm = float(np.linalg.norm(vector))
        if norm > 0.0:
            vector /= norm
        return vector


class CosineReranker:
    """Reranks by cosine similarity of embedder vectors.

    With the same embedder used for retrieval this reproduces the first-stage
    score, which makes it the identity reranker for single-source setups.
    """

    def __init__(self, embedder: Embedder):
        self.embedder = embedder

    def score(self, query: str, passage: str) -> float:
        return _cosine(self.embedder.embed(query), self.embedder.embed(passage))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a, b) / denom)


@dataclass(frozen=True)
class RetrievalConfig:
    k_per_source: int = 10
    k_final: int = 10

    def __post_init__(self) -> None:
        if self.k_per_source < 1 or self.k_final < 1:
            raise InvalidConfigError("k_per_source and k_final must be >= 1")


@dataclass(frozen=True)
class Evidence:
    chunk: Chunk
    retrieval_score: float
    rerank_score: float | None = None


@dataclass(frozen=True)
class EmbeddingIndex:
    """Immutable per-corpus store of chunks and their float32 vectors."""

    corpus_name: str
    dim: int
    chunks: tuple[Chunk, ...]
    vectors: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.chunks)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingIndex):
            return NotImplemented
        return (
            self.corpus_name == other.corpus_name
            and self.dim == other.dim
            and self.chunks == other.chunks
            and np.array_equal(self.vectors, other.vectors)
        )


def build_index(chunks: Sequence[Chunk], embedder: Embedder) -> EmbeddingIndex:
    """Embed every chunk of one corpus, preserving input order."""
    if not chunks:
        raise EmptyCorpusError("cannot build an index over zero chunks")
    corpora = {chunk.corpus_name for chunk in chunks}
    if len(corpora) != 1:
        raise InvalidConfigError(f"one corpus per index, got {sorted(corpora)}")

    vectors = np.zeros((len(chunks), embedder.dim), dtype=np.float32)
    for row, chunk in enumerate(chunks):
        vector = np.asarray(embedder.embed(chunk.text), dtype=np.float32)
        if vector.shape != (embedder.dim,):
            raise DimensionMismatchError(
                f"embedder returned shape {vector.shape}, expected ({embedder.dim},)"
            )
        vectors[row] = vector
    vectors.setflags(write=False)
    return EmbeddingIndex(corpora.pop(), embedder.dim, tuple(chunks), vectors)


def save_index(index: EmbeddingIndex, path) -> None:
    header = {
        "magic": INDEX_MAGIC,
        "corpus": index.corpus_name,
        "dim": index.dim,
        "count": len(index),
    }
    with open(path, "wb") as handle:
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for chunk, vector in zip(index.chunks, index.vectors):
            handle.write(json.dumps(chunk_to_record(chunk), sort_keys=True).encode("utf-8"))
            handle.write(b"\n")
            handle.write(np.ascontiguousarray(vector, dtype="<f4").tobytes())


def load_index(path) -> EmbeddingIndex:
    with open(path, "rb") as handle:
        header = json.loads(handle.readline().decode("utf-8"))
        if header.get("magic") != INDEX_MAGIC:
            raise InvalidConfigError(f"{path}: not a {INDEX_MAGIC} index file")
        dim = int(header["dim"])
        count = int(header["count"])
        chunks: list[Chunk] = []
        vectors = np.zeros((count, dim), dtype=np.float32)
        for row in range(count):
            line = handle.readline()
            if not line:
                raise InvalidConfigError(f"{path}: truncated at entry {row}")
            chunks.append(chunk_from_record(json.loads(line.decode("utf-8"))))
            raw = handle.read(dim * 4)
            if len(raw) != dim * 4:
                raise InvalidConfigError(f"{path}: truncated vector at entry {row}")
            vectors[row] = np.frombuffer(raw, dtype="<f4")
        if handle.read(1):
            raise InvalidConfigError(f"{path}: trailing data after {count} entries")
    vectors.setflags(write=False)
    return EmbeddingIndex(str(header["corpus"]), dim, tuple(chunks), vectors)


def _order_key(evidence: Evidence, score: float):
    chunk = evidence.chunk
    return (-score, chunk.doc_id, chunk.chunk_index, chunk.corpus_name)


def search(index: EmbeddingIndex, query: str, k: int, embedder: Embedder) -> list[Evidence]:
    """Exhaustive cosine top-k over one index, deterministic tie-break."""
    if k < 1:
        raise InvalidConfigError("k must be >= 1")
    if embedder.dim != index.dim:
        raise DimensionMismatchError(
            f"embedder dim {embedder.dim} != index dim {index.dim}"
        )
    query_vector = np.asarray(embedder.embed(query), dtype=np.float64)
    if query_vector.shape != (index.dim,):
        raise DimensionMismatchError(
            f"query vector shape {query_vector.shape}, expected ({index.dim},)"
        )

    matrix = index.vectors.astype(np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    query_norm = float(np.linalg.norm(query_vector))
    denom = norms * query_norm
    dots = matrix @ query_vector
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(denom > 0.0, dots / np.where(denom == 0.0, 1.0, denom), 0.0)

    hits = [Evidence(chunk, float(sims[i])) for i, chunk in enumerate(index.chunks)]
    hits.sort(key=lambda e: _order_key(e, e.retrieval_score))
    return hits[:k]


def retrieve_multi(
    indices: Sequence[EmbeddingIndex],
    query: str,
    cfg: RetrievalConfig,
    embedder: Embedder,
    reranker: Reranker,
) -> list[Evidence]:
    """Pool per-source top-k candidates, rerank the pool, keep the final top-k."""
    if not indices:
        raise InvalidConfigError("retrieve_multi needs at least one index")
    pool: list[Evidence] = []
    for index in indices:
        pool.extend(search(index, query, cfg.k_per_source, embedder))
    reranked = [
        Evidence(e.chunk, e.retrieval_score, float(reranker.score(query, e.chunk.text)))
        for e in pool
    ]
    reranked.sort(key=lambda e: _order_key(e, e.rerank_score))
    return reranked[: cfg.k_final]


@dataclass(frozen=True)
class RetrievalContext:
    """Bundle of indices, embedder, and reranker as used by the decoders."""

    indices: tuple[EmbeddingIndex, ...]
    embedder: Embedder
    reranker: Reranker

    def retrieve(self, query: str, cfg: RetrievalConfig) -> list[Evidence]:
        return retrieve_multi(self.indices, query, cfg, self.embedder, self.reranker)
