"""Decoding controller: gate, fan out over evidence, critique, select.

One inference runs in segments. Each segment starts with a probe generation
that carries the retrieval-decision distribution; the adaptive gate is applied
to it. When the gate says no, the probe text itself is the segment's only
candidate. When it says yes, the retriever supplies the final top-k evidence
and one candidate continuation is generated per evidence with the passage
inlined as a ``<paragraph>`` block; each candidate is critique-scored from its
control-token distributions and the best combined score wins (ties go to the
lowest candidate index, which is the highest rerank position). A segment whose
chosen stream ends in a retrieve/continue token requests another segment, up
to ``max_segments``. Everything observed is recorded in the trace so scores
can be recomputed offline.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .backend import (
    BackendRole,
    GenerationRequest,
    GenerationResponse,
    ModelBackend,
    distribution_from_wire,
    distribution_to_wire,
    first_distribution,
    last_distribution,
    mean_logprob,
)
from .corpus import chunk_from_record, chunk_to_record
from .errors import EngineError, WrongRoleError
from .prompts import render_candidate_prompt, render_query_prompt
from .retriever import Evidence, RetrievalConfig
from .scoring import (
    CandidateScore,
    GateDecision,
    ScoringConfig,
    TokenDistribution,
    adaptive_gate,
    make_candidate_score,
    retrieval_ratio,
    score_rel,
    score_sup,
    score_use,
)
from .tokens import (
    Paragraph,
    ReflectiveToken,
    RetrievalDecision,
    SegmentStream,
    TokenKind,
    parse_stream,
    serialize_stream,
    strip_tokens,
    token,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_SEGMENTS = 8

FewshotTriplet = tuple[str, str, str]


@dataclass(frozen=True)
class Query:
    instruction: str
    input: str = ""
    fewshot: tuple[FewshotTriplet, ...] = ()
    id: str = ""

    def __post_init__(self) -> None:
        if not self.instruction:
            raise ValueError("query instruction must be non-empty")

    @property
    def retrieval_text(self) -> str:
        return f"{self.instruction} {self.input}".strip()


@dataclass(frozen=True)
class Candidate:
    evidence: Evidence | None
    segment: SegmentStream
    score: CandidateScore
    distributions: tuple[TokenDistribution, ...] = ()


@dataclass(frozen=True)
class SegmentRecord:
    gate_decision: GateDecision
    gate_ratio: float
    candidates: tuple[Candidate, ...]
    chosen: int
    diagnostics: tuple[str, ...] = ()


@dataclass(frozen=True)
class InferenceTrace:
    query: Query
    segments: tuple[SegmentRecord, ...]
    final_text: str
    evidence_provenance: dict[str, int] = field(default_factory=dict)
    error: str | None = None
    error_kind: str | None = None

    @property
    def gate_decision(self) -> GateDecision | None:
        return self.segments[0].gate_decision if self.segments else None

    @property
    def gate_ratio(self) -> float | None:
        return self.segments[0].gate_ratio if self.segments else None

    @property
    def candidates(self) -> tuple[Candidate, ...]:
        return self.segments[0].candidates if self.segments else ()

    @property
    def chosen(self) -> int | None:
        return self.segments[0].chosen if self.segments else None

    @property
    def chosen_candidate(self) -> Candidate | None:
        if not self.segments:
            return None
        first = self.segments[0]
        return first.candidates[first.chosen]


def _plain_candidate(response: GenerationResponse, scoring_cfg: ScoringConfig) -> Candidate:
    """Candidate generated without evidence: rel/sup absent from the critique."""
    use_dist = last_distribution(response, TokenKind.USE)
    score = make_candidate_score(
        s_rel=None,
        s_sup=None,
        s_use=score_use(use_dist) if use_dist is not None else 0.0,
        lm_logprob_mean=mean_logprob(response),
        weights=scoring_cfg.weights,
        lambda_lm=scoring_cfg.lambda_lm,
    )
    return Candidate(
        evidence=None,
        segment=parse_stream(response.text),
        score=score,
        distributions=response.control_probs,
    )


def _evidence_candidate(
    evidence: Evidence, response: GenerationResponse, scoring_cfg: ScoringConfig
) -> Candidate:
    rel_dist = first_distribution(response, TokenKind.REL)
    sup_dist = first_distribution(response, TokenKind.SUP)
    use_dist = last_distribution(response, TokenKind.USE)
    score = make_candidate_score(
        s_rel=score_rel(rel_dist) if rel_dist is not None else None,
        s_sup=score_sup(sup_dist) if sup_dist is not None else None,
        s_use=score_use(use_dist) if use_dist is not None else 0.0,
        lm_logprob_mean=mean_logprob(response),
        weights=scoring_cfg.weights,
        lambda_lm=scoring_cfg.lambda_lm,
    )
    items = (
        token(RetrievalDecision.RETRIEVAL),
        Paragraph(evidence.chunk.text),
        *parse_stream(response.text).items,
    )
    return Candidate(
        evidence=evidence,
        segment=SegmentStream(items),
        score=score,
        distributions=response.control_probs,
    )


def _argmax_combined(candidates: Sequence[Candidate]) -> int:
    best = 0
    for index in range(1, len(candidates)):
        if candidates[index].score.combined > candidates[best].score.combined:
            best = index
    return best


def _requests_continuation(segment: SegmentStream) -> bool:
    if not segment.items:
        return False
    last = segment.items[-1]
    return isinstance(last, ReflectiveToken) and last.value in (
        RetrievalDecision.RETRIEVAL,
        RetrievalDecision.CONTINUE,
    )


def run_inference(
    query: Query,
    generator: ModelBackend,
    retrieval,
    scoring_cfg: ScoringConfig,
    retrieval_cfg: RetrievalConfig,
    max_segments: int = DEFAULT_MAX_SEGMENTS,
    max_inflight: int = 8,
) -> InferenceTrace:
    """Run the gated, evidence-fanned decode for one query.

    ``retrieval`` is anything exposing ``retrieve(query_text, cfg) ->
    list[Evidence]``; it is only consulted when the gate decides to retrieve.
    """
    if generator.role is not BackendRole.GENERATOR:
        raise WrongRoleError(f"generator backend required, got role {generator.role.value}")

    segments: list[SegmentRecord] = []
    accumulated: list = []

    while len(segments) < max_segments:
        prior_wire = serialize_stream(SegmentStream(tuple(accumulated)))
        probe = generator.generate(
            GenerationRequest(
                prompt=render_query_prompt(query, prior_wire),
                want_control_probs=(TokenKind.RET,),
            )
        )
        ret_dist = first_distribution(probe, TokenKind.RET)
        ratio = retrieval_ratio(ret_dist)
        decision = adaptive_gate(ret_dist, scoring_cfg.gate)
        diagnostics: list[str] = []

        if decision is GateDecision.RETRIEVE:
            evidences = retrieval.retrieve(query.retrieval_text, retrieval_cfg)
            if evidences:
                candidates = _generate_candidates(
                    query, generator, evidences, scoring_cfg, prior_wire, max_inflight
                )
            else:
                diagnostics.append("retrieval returned no evidence; answered without it")
                logger.warning("query %s: %s", query.id or "<anon>", diagnostics[-1])
                candidates = (_plain_candidate(probe, scoring_cfg),)
        else:
            candidates = (_plain_candidate(probe, scoring_cfg),)

        chosen = _argmax_combined(candidates)
        segments.append(
            SegmentRecord(decision, ratio, tuple(candidates), chosen, tuple(diagnostics))
        )
        accumulated.extend(candidates[chosen].segment.items)
        if not _requests_continuation(candidates[chosen].segment):
            break

    provenance: dict[str, int] = {}
    for record in segments:
        for candidate in record.candidates:
            if candidate.evidence is not None:
                corpus = candidate.evidence.chunk.corpus_name
                provenance[corpus] = provenance.get(corpus, 0) + 1

    return InferenceTrace(
        query=query,
        segments=tuple(segments),
        final_text=strip_tokens(SegmentStream(tuple(accumulated))),
        evidence_provenance=provenance,
    )


def _generate_candidates(
    query: Query,
    generator: ModelBackend,
    evidences: Sequence[Evidence],
    scoring_cfg: ScoringConfig,
    prior_wire: str,
    max_inflight: int,
) -> tuple[Candidate, ...]:
    requests = [
        GenerationRequest(
            prompt=render_candidate_prompt(query, evidence.chunk.text, prior_wire),
            want_control_probs=(TokenKind.REL, TokenKind.SUP, TokenKind.USE),
        )
        for evidence in evidences
    ]
    if max_inflight > 1 and len(requests) > 1:
        with ThreadPoolExecutor(max_workers=min(max_inflight, len(requests))) as pool:
            responses = list(pool.map(generator.generate, requests))
    else:
        responses = [generator.generate(r) for r in requests]
    return tuple(
        _evidence_candidate(evidence, response, scoring_cfg)
        for evidence, response in zip(evidences, responses)
    )


def run_batch(
    queries: Sequence[Query],
    generator: ModelBackend,
    retrieval,
    scoring_cfg: ScoringConfig,
    retrieval_cfg: RetrievalConfig,
    max_segments: int = DEFAULT_MAX_SEGMENTS,
    max_inflight: int = 8,
) -> list[InferenceTrace]:
    """Order-preserving batch decode; per-query errors land in the trace.

    Queries run concurrently up to ``max_inflight``; candidate generations
    within one query then run serially so the bound is not multiplied.
    """

    def one(query: Query) -> InferenceTrace:
        try:
            return run_inference(
                query,
                generator,
                retrieval,
                scoring_cfg,
                retrieval_cfg,
                max_segments=max_segments,
                max_inflight=1,
            )
        except EngineError as exc:
            logger.error("query %s failed: %s", query.id or "<anon>", exc)
            return InferenceTrace(
                query=query,
                segments=(),
                final_text="",
                error=str(exc),
                error_kind=type(exc).__name__,
            )

    if not queries:
        return []
    if max_inflight > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=min(max_inflight, len(queries))) as pool:
            return list(pool.map(one, queries))
    return [one(query) for query in queries]


def _evidence_to_record(evidence: Evidence | None) -> dict | None:
    if evidence is None:
        return None
    record = chunk_to_record(evidence.chunk)
    record["retrieval_score"] = evidence.retrieval_score
    record["rerank_score"] = evidence.rerank_score
    return record


def _evidence_from_record(record: dict | None) -> Evidence | None:
    if record is None:
        return None
    fields = dict(record)
    retrieval_score = fields.pop("retrieval_score")
    rerank_score = fields.pop("rerank_score")
    return Evidence(
        chunk=chunk_from_record(fields),
        retrieval_score=float(retrieval_score),
        rerank_score=None if rerank_score is None else float(rerank_score),
    )


def _candidate_to_record(candidate: Candidate) -> dict:
    score = candidate.score
    return {
        "evidence": _evidence_to_record(candidate.evidence),
        "text": serialize_stream(candidate.segment),
        "distributions": [distribution_to_wire(d) for d in candidate.distributions],
        "score": {
            "s_rel": score.s_rel,
            "s_sup": score.s_sup,
            "s_use": score.s_use,
            "critique": score.critique,
            "lm_logprob_mean": score.lm_logprob_mean,
            "combined": score.combined,
        },
    }


def _candidate_from_record(record: dict) -> Candidate:
    raw_score = record["score"]
    score = CandidateScore(
        s_rel=None if raw_score["s_rel"] is None else float(raw_score["s_rel"]),
        s_sup=None if raw_score["s_sup"] is None else float(raw_score["s_sup"]),
        s_use=float(raw_score["s_use"]),
        critique=float(raw_score["critique"]),
        lm_logprob_mean=float(raw_score["lm_logprob_mean"]),
        combined=float(raw_score["combined"]),
    )
    return Candidate(
        evidence=_evidence_from_record(record["evidence"]),
        segment=parse_stream(record["text"]),
        score=score,
        distributions=tuple(
            distribution_from_wire(d) for d in record.get("distributions", [])
        ),
    )


def trace_to_record(trace: InferenceTrace) -> dict:
    """Flatten a trace into one JSONL record; field-by-field schema in README."""
    return {
        "id": trace.query.id,
        "instruction": trace.query.instruction,
        "input": trace.query.input,
        "fewshot": [list(shot) for shot in trace.query.fewshot],
        "gate_decision": trace.gate_decision.value if trace.gate_decision else None,
        "gate_ratio": trace.gate_ratio,
        "chosen": trace.chosen,
        "final_text": trace.final_text,
        "evidence_provenance": dict(sorted(trace.evidence_provenance.items())),
        "segments": [
            {
                "gate_decision": record.gate_decision.value,
                "gate_ratio": record.gate_ratio,
                "chosen": record.chosen,
                "diagnostics": list(record.diagnostics),
                "candidates": [_candidate_to_record(c) for c in record.candidates],
            }
            for record in trace.segments
        ],
        "error": trace.error,
        "error_kind": trace.error_kind,
    }


def trace_from_record(record: dict) -> InferenceTrace:
    query = Query(
        instruction=record["instruction"],
        input=record.get("input", ""),
        fewshot=tuple(tuple(shot) for shot in record.get("fewshot", [])),
        id=str(record.get("id", "")),
    )
    segments = tuple(
        SegmentRecord(
            gate_decision=GateDecision(raw["gate_decision"]),
            gate_ratio=float(raw["gate_ratio"]),
            candidates=tuple(_candidate_from_record(c) for c in raw["candidates"]),
            chosen=int(raw["chosen"]),
            diagnostics=tuple(raw.get("diagnostics", [])),
        )
        for raw in record.get("segments", [])
    )
    return InferenceTrace(
        query=query,
        segments=segments,
        final_text=record.get("final_text", ""),
        evidence_provenance=dict(record.get("evidence_provenance", {})),
        error=record.get("error"),
        error_kind=record.get("error_kind"),
    )
