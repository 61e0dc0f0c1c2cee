"""Engine configuration: defaults, strict JSON loading, and flag overrides.

Precedence is flags > config file > defaults. The effective configuration is
echoed into JSON/JSONL output artifacts for provenance (binary index files
keep their fixed header instead).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

from .corpus import DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP
from .errors import InvalidConfigError
from .retriever import RetrievalConfig
from .scoring import ScoringConfig


@dataclass(frozen=True)
class ChunkConfig:
    size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP

    def __post_init__(self) -> None:
        if self.size <= 0 or self.overlap < 0 or self.overlap >= self.size:
            raise InvalidConfigError("need 0 <= overlap < size and size > 0")


@dataclass(frozen=True)
class BackendConfig:
    url: str = ""
    timeout_ms: int = 30000
    max_retries: int = 2
    max_inflight: int = 8

    def __post_init__(self) -> None:
        if self.timeout_ms < 1 or self.max_retries < 0 or self.max_inflight < 1:
            raise InvalidConfigError("backend timing/concurrency values out of range")


def _reject_unknown(section: str, raw: Mapping, known: set[str]) -> None:
    unknown = set(raw) - known
    if unknown:
        raise InvalidConfigError(f"unknown {section} config keys: {sorted(unknown)}")


@dataclass(frozen=True)
class EngineConfig:
    chunk: ChunkConfig = field(default_factory=ChunkConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: Mapping) -> "EngineConfig":
        _reject_unknown("engine", raw, {"chunk", "retrieval", "scoring", "backend", "seed"})

        chunk_raw = dict(raw.get("chunk", {}))
        _reject_unknown("chunk", chunk_raw, {"size", "overlap"})
        chunk = ChunkConfig(
            size=int(chunk_raw.get("size", DEFAULT_CHUNK_SIZE)),
            overlap=int(chunk_raw.get("overlap", DEFAULT_OVERLAP)),
        )

        retrieval_raw = dict(raw.get("retrieval", {}))
        _reject_unknown("retrieval", retrieval_raw, {"k_per_source", "k_final"})
        retrieval = RetrievalConfig(
            k_per_source=int(retrieval_raw.get("k_per_source", 10)),
            k_final=int(retrieval_raw.get("k_final", 10)),
        )

        backend_raw = dict(raw.get("backend", {}))
        _reject_unknown(
            "backend", backend_raw, {"url", "timeout_ms", "max_retries", "max_inflight"}
        )
        backend = BackendConfig(
            url=str(backend_raw.get("url", "")),
            timeout_ms=int(backend_raw.get("timeout_ms", 30000)),
            max_retries=int(backend_raw.get("max_retries", 2)),
            max_inflight=int(backend_raw.get("max_inflight", 8)),
        )

        return cls(
            chunk=chunk,
            retrieval=retrieval,
            scoring=ScoringConfig.from_dict(dict(raw.get("scoring", {}))),
            backend=backend,
            seed=int(raw.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "EngineConfig":
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
        if not isinstance(raw, dict):
            raise InvalidConfigError(f"{path}: top-level config must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "chunk": {"size": self.chunk.size, "overlap": self.chunk.overlap},
            "retrieval": {
                "k_per_source": self.retrieval.k_per_source,
                "k_final": self.retrieval.k_final,
            },
            "scoring": self.scoring.to_dict(),
            "backend": {
                "url": self.backend.url,
                "timeout_ms": self.backend.timeout_ms,
                "max_retries": self.backend.max_retries,
                "max_inflight": self.backend.max_inflight,
            },
            "seed": self.seed,
        }

    def with_overrides(self, **overrides) -> "EngineConfig":
        """Apply dotted-path overrides like ``("backend.url", value)`` pairs.

        Only non-None values override; unknown paths raise.
        """
        data = self.to_dict()
        for path, value in overrides.items():
            if value is None:
                continue
            parts = path.split("__")
            target = data
            for part in parts[:-1]:
                if part not in target:
                    raise InvalidConfigError(f"unknown config path {path!r}")
                target = target[part]
            if parts[-1] not in target:
                raise InvalidConfigError(f"unknown config path {path!r}")
            target[parts[-1]] = value
        return EngineConfig.from_dict(data)
