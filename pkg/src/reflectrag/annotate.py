"""Critic annotation of instruction data: sample, annotate, filter, export.

A critic backend is prompted once per decision: first for the retrieve/no
retrieve call, then (when retrieval is called for) relevance and support
against the single top-reranked evidence passage, and always for a utility
rating. The decisions are interleaved with the original output into a
training-ready stream:

* no retrieval:  ``[No Retrieval] <output> [Utility:N]``
* retrieval:     ``[Retrieval] <paragraph>evidence</paragraph> [Relevant|...]
  <output> [Fully supported|...] [Utility:N]``

Instances whose critic replies contain no parseable token are flagged rather
than dropped on the spot; the filter stage applies the documented drop rules
and reports per-reason counts.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .backend import BackendRole, GenerationRequest, ModelBackend
from .errors import NotEnoughInstancesError, WrongRoleError
from .prompts import render_critic_prompt
from .retriever import RetrievalConfig
from .scoring import GateDecision  # noqa: F401  (re-exported for CLI reporting)
from .tokens import (
    Paragraph,
    ReflectiveToken,
    RetrievalDecision,
    SegmentStream,
    Text,
    TokenKind,
    parse_stream,
    serialize_stream,
    token,
)

logger = logging.getLogger(__name__)

FLAG_MALFORMED = "malformed-critic-output"
FLAG_NO_EVIDENCE = "no-evidence-retrieved"

REASON_MALFORMED = "malformed-critic-output"
REASON_NO_EVIDENCE = "no-evidence-retrieved"
REASON_CONTINUE = "continue-at-start"
REASON_INVARIANT = "invariant-violation"


@dataclass(frozen=True)
class InstructionInstance:
    id: str
    source: str
    instruction: str
    input: str
    output: str

    def __post_init__(self) -> None:
        if not self.instruction.strip() or not self.output.strip():
            raise ValueError("instruction and output must be non-empty")


@dataclass(frozen=True)
class Annotations:
    ret: ReflectiveToken | None
    rel: ReflectiveToken | None
    sup: ReflectiveToken | None
    use: ReflectiveToken | None


@dataclass(frozen=True)
class AnnotatedInstance:
    base: InstructionInstance
    stream: SegmentStream
    annotations: Annotations
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class FilterReport:
    kept: int
    dropped: int
    reasons: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kept": self.kept,
            "dropped": self.dropped,
            "reasons": dict(sorted(self.reasons.items())),
        }


def sample_for_critic(
    instances: Sequence[InstructionInstance], n: int, seed: int
) -> list[InstructionInstance]:
    """Deterministic duplicate-free sample of n instances under the seed."""
    if n > len(instances):
        raise NotEnoughInstancesError(f"asked for {n} of {len(instances)} instances")
    return random.Random(seed).sample(list(instances), n)


def _first_token_of_kind(reply_text: str, kind: TokenKind) -> ReflectiveToken | None:
    return parse_stream(reply_text).first_token(kind)


def annotate_instance(
    instance: InstructionInstance,
    critic: ModelBackend,
    retrieval,
    retrieval_cfg: RetrievalConfig | None = None,
) -> AnnotatedInstance:
    """Annotate one instance with critic decisions and optional evidence.

    ``retrieval`` exposes ``retrieve(query_text, cfg) -> list[Evidence]`` and
    is consulted only when the critic calls for retrieval; relevance and
    support are then judged against the top-reranked passage.
    """
    if critic.role is not BackendRole.CRITIC:
        raise WrongRoleError(f"critic backend required, got role {critic.role.value}")
    retrieval_cfg = retrieval_cfg or RetrievalConfig()

    flags: list[str] = []

    def ask(template: str, **extra) -> str:
        prompt = render_critic_prompt(
            template, instance.instruction, instance.input, **extra
        )
        return critic.generate(GenerationRequest(prompt=prompt)).text

    ret = _first_token_of_kind(ask("retrieval", output=instance.output), TokenKind.RET)
    if ret is None:
        flags.append(FLAG_MALFORMED)

    rel = sup = None
    evidence_text: str | None = None
    if ret is not None and ret.value is RetrievalDecision.RETRIEVAL:
        evidences = retrieval.retrieve(
            f"{instance.instruction} {instance.input}".strip(), retrieval_cfg
        )
        if not evidences:
            flags.append(FLAG_NO_EVIDENCE)
            logger.warning("instance %s: retrieval returned nothing", instance.id)
        else:
            evidence_text = evidences[0].chunk.text
            rel = _first_token_of_kind(
                ask("relevance", evidence=evidence_text), TokenKind.REL
            )
            sup = _first_token_of_kind(
                ask("support", evidence=evidence_text, output=instance.output),
                TokenKind.SUP,
            )
            if rel is None or sup is None:
                flags.append(FLAG_MALFORMED)

    use = _first_token_of_kind(ask("utility", output=instance.output), TokenKind.USE)
    if use is None:
        flags.append(FLAG_MALFORMED)

    items: list = []
    if ret is not None:
        items.append(ret)
    if evidence_text is not None:
        items.append(Paragraph(evidence_text))
        if rel is not None:
            items.append(rel)
    # padded so the serialized wire reads "[Token] output text [Token]"
    items.append(Text(f" {instance.output.strip()} "))
    if sup is not None:
        items.append(sup)
    if use is not None:
        items.append(use)

    return AnnotatedInstance(
        base=instance,
        stream=SegmentStream(tuple(items)),
        annotations=Annotations(ret=ret, rel=rel, sup=sup, use=use),
        flags=tuple(dict.fromkeys(flags)),
    )


def annotate_all(
    instances: Iterable[InstructionInstance],
    critic: ModelBackend,
    retrieval,
    retrieval_cfg: RetrievalConfig | None = None,
) -> list[AnnotatedInstance]:
    return [
        annotate_instance(instance, critic, retrieval, retrieval_cfg)
        for instance in instances
    ]


def _violates_invariants(annotated: AnnotatedInstance) -> bool:
    stream = annotated.stream
    ann = annotated.annotations
    if ann.ret is None or ann.use is None:
        return True
    if not stream.items or stream.items[0] != ann.ret:
        return True
    if parse_stream(serialize_stream(stream)) != stream:
        return True
    if parse_stream(serialize_stream(stream)).diagnostics:
        return True

    paragraphs = stream.paragraphs()
    if ann.ret.value is RetrievalDecision.RETRIEVAL:
        if len(paragraphs) != 1 or ann.rel is None or ann.sup is None:
            return True
        first_text = next(
            (i for i, item in enumerate(stream.items) if isinstance(item, Text)), None
        )
        paragraph_at = next(
            i for i, item in enumerate(stream.items) if isinstance(item, Paragraph)
        )
        if first_text is not None and paragraph_at > first_text:
            return True
    elif paragraphs:
        return True
    return False


def filter_annotated(
    instances: Sequence[AnnotatedInstance],
) -> tuple[list[AnnotatedInstance], FilterReport]:
    """Apply the drop rules, preserving the order of kept instances.

    Rules, first match wins: flagged critic output; a Continue decision in the
    leading retrieve slot; any stream or annotation invariant violation.
    """
    kept: list[AnnotatedInstance] = []
    reasons: dict[str, int] = {}

    def drop(reason: str) -> None:
        reasons[reason] = reasons.get(reason, 0) + 1

    for annotated in instances:
        if FLAG_MALFORMED in annotated.flags:
            drop(REASON_MALFORMED)
        elif FLAG_NO_EVIDENCE in annotated.flags:
            drop(REASON_NO_EVIDENCE)
        elif (
            annotated.annotations.ret is not None
            and annotated.annotations.ret.value is RetrievalDecision.CONTINUE
        ):
            drop(REASON_CONTINUE)
        elif _violates_invariants(annotated):
            drop(REASON_INVARIANT)
        else:
            kept.append(annotated)

    report = FilterReport(
        kept=len(kept), dropped=len(instances) - len(kept), reasons=reasons
    )
    return kept, report


def export_training(instances: Sequence[AnnotatedInstance], path) -> None:
    """Write training records ``{"id", "instruction", "input", "text"}``.

    Output is byte-stable for identical inputs; zero instances produce an
    empty file.
    """
    with open(path, "w", encoding="utf-8") as handle:
        for annotated in instances:
            record = {
                "id": annotated.base.id,
                "instruction": annotated.base.instruction,
                "input": annotated.base.input,
                "text": serialize_stream(annotated.stream),
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def instance_from_record(record: dict) -> InstructionInstance:
    return InstructionInstance(
        id=str(record["id"]),
        source=str(record.get("source", "")),
        instruction=str(record["instruction"]),
        input=str(record.get("input", "")),
        output=str(record["output"]),
    )


def annotated_to_record(annotated: AnnotatedInstance) -> dict:
    return {
        "id": annotated.base.id,
        "source": annotated.base.source,
        "instruction": annotated.base.instruction,
        "input": annotated.base.input,
        "output": annotated.base.output,
        "text": serialize_stream(annotated.stream),
        "flags": list(annotated.flags),
    }


def annotated_from_record(record: dict) -> AnnotatedInstance:
    """Rebuild an annotated instance; annotations are re-derived from the stream."""
    base = instance_from_record(record)
    stream = parse_stream(str(record.get("text", "")))
    return AnnotatedInstance(
        base=base,
        stream=stream,
        annotations=Annotations(
            ret=stream.first_token(TokenKind.RET),
            rel=stream.first_token(TokenKind.REL),
            sup=stream.first_token(TokenKind.SUP),
            use=stream.last_token(TokenKind.USE),
        ),
        flags=tuple(record.get("flags", [])),
    )
