"""Evaluation harness: answer extraction, Rouge, kNN shots, trace analysis.

Rouge tokenization is fixed for cross-run stability: lowercase, split on
whitespace, strip leading/trailing punctuation from each token, drop tokens
that become empty. Multiple-choice items are scored strictly: an answer that
cannot be extracted counts as incorrect. Trace analysis mirrors the report
structure of the retrieval studies: the fraction of gated retrievals, accuracy
stratified by gate decision (null for an empty stratum, never 0), and the
per-corpus usage ratio of chosen evidence normalized over retrieved traces.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .annotate import InstructionInstance
from .errors import IdMismatchError, NotEnoughInstancesError
from .inference import InferenceTrace
from .retriever import Embedder
from .scoring import GateDecision


@dataclass(frozen=True)
class MCQItem:
    id: str
    question: str
    options: dict[str, str]
    gold: str

    def __post_init__(self) -> None:
        if len(self.options) < 2:
            raise ValueError("multiple-choice items need at least two options")
        if self.gold not in self.options:
            raise ValueError(f"gold letter {self.gold!r} is not an option")


@dataclass(frozen=True)
class GoldRecord:
    """One gold entry: multiple-choice fields and/or a long-form reference."""

    id: str
    options: dict[str, str] | None = None
    gold: str | None = None
    reference: str | None = None

    @classmethod
    def from_record(cls, record: Mapping) -> "GoldRecord":
        return cls(
            id=str(record["id"]),
            options=dict(record["options"]) if record.get("options") else None,
            gold=str(record["gold"]) if record.get("gold") is not None else None,
            reference=(
                str(record["reference"]) if record.get("reference") is not None else None
            ),
        )


@dataclass(frozen=True)
class RougeScore:
    recall: float
    precision: float
    f1: float

    def to_dict(self) -> dict:
        return {"recall": self.recall, "precision": self.precision, "f1": self.f1}


def _letter_patterns(options: Iterable[str]) -> list[re.Pattern]:
    letters = "".join(re.escape(letter) for letter in options)
    cls = f"[{letters}]"
    return [
        re.compile(rf"answer\s+is\s*:?\s*\(?({cls})\)?(?![A-Za-z0-9])", re.IGNORECASE),
        re.compile(rf"option\s*:?\s*\(?({cls})\)?(?![A-Za-z0-9])", re.IGNORECASE),
        re.compile(rf"\(({cls})\)", re.IGNORECASE),
    ]


def extract_answer(text: str, options: Iterable[str]) -> str | None:
    """Pull a multiple-choice letter out of free text.

    Precedence: "answer is (X)" or "answer is X", then "Option X", then a
    standalone "(X)"; case-insensitive; None when nothing matches.
    """
    option_keys = {letter.upper(): letter for letter in options}
    for pattern in _letter_patterns(option_keys):
        match = pattern.search(text)
        if match:
            return option_keys[match.group(1).upper()]
    return None


_EDGE_PUNCT = string.punctuation


def rouge_tokenize(text: str) -> list[str]:
    tokens = []
    for raw in text.lower().split():
        word = raw.strip(_EDGE_PUNCT)
        if word:
            tokens.append(word)
    return tokens


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _prf(overlap: float, cand_total: float, ref_total: float) -> RougeScore:
    if cand_total == 0 or ref_total == 0:
        return RougeScore(0.0, 0.0, 0.0)
    recall = overlap / ref_total
    precision = overlap / cand_total
    if recall + precision == 0.0:
        return RougeScore(recall, precision, 0.0)
    return RougeScore(recall, precision, 2 * recall * precision / (recall + precision))


def rouge_n(candidate: str, reference: str, n: int) -> RougeScore:
    """Multiset n-gram overlap recall/precision/f1; zeros when a side is empty."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = _ngrams(rouge_tokenize(candidate), n)
    ref = _ngrams(rouge_tokenize(reference), n)
    overlap = sum((cand & ref).values())
    return _prf(overlap, sum(cand.values()), sum(ref.values()))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        current = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                current[j] = previous[j - 1] + 1
            else:
                current[j] = max(previous[j], current[j - 1])
        previous = current
    return previous[len(b)]


def rouge_l(candidate: str, reference: str) -> RougeScore:
    """Longest-common-subsequence recall/precision/f1 over tokens."""
    cand = rouge_tokenize(candidate)
    ref = rouge_tokenize(reference)
    lcs = _lcs_length(cand, ref)
    return _prf(lcs, len(cand), len(ref))


def knn_fewshot(
    query: str,
    pool: Sequence[InstructionInstance],
    k: int,
    embedder: Embedder,
) -> list[InstructionInstance]:
    """The k pool items nearest to the query by embedding cosine.

    Items are keyed on ``instruction + " " + input``; ties break on id
    ascending, and ``knn_fewshot(k)`` is always a prefix of
    ``knn_fewshot(k+1)``.
    """
    if k > len(pool):
        raise NotEnoughInstancesError(f"asked for {k} neighbors from {len(pool)} items")
    import numpy as np

    query_vector = embedder.embed(query)
    query_norm = float(np.linalg.norm(query_vector))

    def similarity(instance: InstructionInstance) -> float:
        vector = embedder.embed(f"{instance.instruction} {instance.input}".strip())
        denom = query_norm * float(np.linalg.norm(vector))
        if denom == 0.0:
            return 0.0
        return float(np.dot(query_vector, vector) / denom)

    ranked = sorted(pool, key=lambda inst: (-similarity(inst), inst.id))
    return ranked[:k]


@dataclass(frozen=True)
class EvalReport:
    accuracy: float | None
    item_records: tuple[dict, ...]
    rouge: dict | None
    retrieve_fraction: float
    corpus_usage: dict[str, float]
    stratified_accuracy: dict[str, float | None]
    counts: dict[str, int] = field(default_factory=dict)
    embedding_similarity: float | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "retrieve_fraction": self.retrieve_fraction,
            "stratified_accuracy": dict(self.stratified_accuracy),
            "corpus_usage": dict(sorted(self.corpus_usage.items())),
            "rouge": self.rouge,
            "embedding_similarity": self.embedding_similarity,
            "counts": dict(sorted(self.counts.items())),
            "items": [dict(record) for record in self.item_records],
        }


def _mean(values: Sequence[float]) -> float | None:
    return sum(values) / len(values) if values else None


def analyze_traces(
    traces: Sequence[InferenceTrace],
    gold: Sequence[GoldRecord],
    similarity_fn: Callable[[str, str], float] | None = None,
) -> EvalReport:
    """Score traces against gold records aligned by id.

    ``similarity_fn`` is the pluggable embedding-similarity slot (for metrics
    in the BERTScore family); no default implementation ships.
    """
    by_id: dict[str, GoldRecord] = {}
    for record in gold:
        if record.id in by_id:
            raise IdMismatchError(f"duplicate gold id {record.id!r}")
        by_id[record.id] = record

    item_records: list[dict] = []
    mcq_flags: list[bool] = []
    retrieved_flags: list[bool] = []
    rouge_rows: list[dict] = []
    similarities: list[float] = []
    corpus_counts: Counter = Counter()
    retrieved = 0
    errors = 0

    for trace in traces:
        trace_id = trace.query.id
        if trace_id not in by_id:
            raise IdMismatchError(f"trace id {trace_id!r} has no gold record")
        entry = by_id[trace_id]

        if trace.error is not None:
            errors += 1
        did_retrieve = trace.gate_decision is GateDecision.RETRIEVE
        if did_retrieve:
            retrieved += 1
            chosen = trace.chosen_candidate
            if chosen is not None and chosen.evidence is not None:
                corpus_counts[chosen.evidence.chunk.corpus_name] += 1

        record: dict = {
            "id": trace_id,
            "gate_decision": trace.gate_decision.value if trace.gate_decision else None,
            "final_text": trace.final_text,
        }

        if entry.options is not None and entry.gold is not None:
            predicted = extract_answer(trace.final_text, entry.options)
            correct = predicted == entry.gold
            record["predicted"] = predicted
            record["gold"] = entry.gold
            record["correct"] = correct
            mcq_flags.append(correct)
            retrieved_flags.append(did_retrieve)

        if entry.reference is not None:
            scores = {
                "r1": rouge_n(trace.final_text, entry.reference, 1).to_dict(),
                "r2": rouge_n(trace.final_text, entry.reference, 2).to_dict(),
                "rl": rouge_l(trace.final_text, entry.reference).to_dict(),
            }
            record["rouge"] = scores
            rouge_rows.append(scores)
            if similarity_fn is not None:
                value = float(similarity_fn(trace.final_text, entry.reference))
                record["embedding_similarity"] = value
                similarities.append(value)

        item_records.append(record)

    def stratum(want_retrieved: bool) -> float | None:
        values = [
            correct
            for correct, was in zip(mcq_flags, retrieved_flags)
            if was == want_retrieved
        ]
        return _mean([1.0 if v else 0.0 for v in values])

    rouge_summary = None
    if rouge_rows:
        rouge_summary = {
            metric: {
                facet: _mean([row[metric][facet] for row in rouge_rows])
                for facet in ("recall", "precision", "f1")
            }
            for metric in ("r1", "r2", "rl")
        }

    total_corpus = sum(corpus_counts.values())
    corpus_usage = {
        name: count / total_corpus for name, count in sorted(corpus_counts.items())
    }

    return EvalReport(
        accuracy=_mean([1.0 if v else 0.0 for v in mcq_flags]),
        item_records=tuple(item_records),
        rouge=rouge_summary,
        retrieve_fraction=(retrieved / len(traces)) if traces else 0.0,
        corpus_usage=corpus_usage,
        stratified_accuracy={
            "retrieved": stratum(True),
            "not_retrieved": stratum(False),
        },
        counts={
            "traces": len(traces),
            "retrieved": retrieved,
            "mcq_items": len(mcq_flags),
            "reference_items": len(rouge_rows),
            "errors": errors,
        },
        embedding_similarity=_mean(similarities),
    )
