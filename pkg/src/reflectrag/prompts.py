"""Prompt rendering from the versioned template assets.

The generator prompt is a sequence of Instruction/Input/Output blocks: the
few-shot examples come first with their outputs filled in, then the query
block whose output slot is the generation point. Evidence is inlined as a
``<paragraph>`` block directly before the output slot. The Input section is
omitted when the input is empty.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

from .tokens import PARAGRAPH_CLOSE, PARAGRAPH_OPEN

_INPUT_SECTION = "### Input:\n{input}\n\n"
_OUTPUT_MARKER = "### Output:\n"


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return (
        resources.files("reflectrag").joinpath("assets", name).read_text(encoding="utf-8")
    )


def _render_block(
    instruction: str,
    input_text: str,
    output: str,
    evidence: str | None = None,
) -> str:
    template = load_template("generator_block.txt")
    if not input_text:
        template = template.replace(_INPUT_SECTION, "")
    if evidence is not None:
        template = template.replace(
            _OUTPUT_MARKER,
            f"{PARAGRAPH_OPEN}{evidence}{PARAGRAPH_CLOSE}\n{_OUTPUT_MARKER}",
        )
    return template.format(instruction=instruction, input=input_text, output=output)


def render_query_prompt(query, prior_text: str = "") -> str:
    """Prompt for the gate probe and no-retrieval generation."""
    blocks = [
        _render_block(shot[0], shot[1], shot[2]) for shot in query.fewshot
    ]
    blocks.append(_render_block(query.instruction, query.input, prior_text))
    return "\n\n".join(blocks)


def render_candidate_prompt(query, evidence_text: str, prior_text: str = "") -> str:
    """Prompt for one evidence-conditioned candidate generation."""
    blocks = [
        _render_block(shot[0], shot[1], shot[2]) for shot in query.fewshot
    ]
    blocks.append(
        _render_block(query.instruction, query.input, prior_text, evidence=evidence_text)
    )
    return "\n\n".join(blocks)


def render_critic_prompt(
    name: str,
    instruction: str,
    input_text: str,
    output: str = "",
    evidence: str = "",
) -> str:
    """Fill one of the critic templates (retrieval, relevance, support, utility)."""
    template = load_template(f"critic_{name}.txt")
    return template.format(
        instruction=instruction, input=input_text, output=output, evidence=evidence
    )
