"""Critique scoring over control-token distributions and the retrieval gate.

Each scorer turns one token distribution into a normalized scalar:

* relevance: mass on Relevant over the Relevant/Irrelevant total, in [0, 1];
* support: Fully counts 1, Partially counts 0.5, over the full total, in [0, 1];
* utility: levels 1..5 weighted (-1, -0.5, 0, 0.5, 1) over the total, in [-1, 1].

The critique of a candidate is the weighted sum of its present component
scores, and the final candidate score adds the mean per-token log-probability
scaled by ``lambda_lm``. Retrieval is gated by the normalized probability of
the retrieve decision exceeding ``delta`` strictly; Continue mass is excluded
from the ratio.

All formulas self-normalize, so scaling a distribution by any c > 0 changes
nothing. Vocabulary values missing from a backend-returned distribution are
floor-smoothed to 1e-10 before normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

from .errors import DegenerateDistributionError, InvalidConfigError, WrongKindError
from .tokens import (
    VOCABULARY,
    RelevanceLabel,
    RetrievalDecision,
    SupportLabel,
    TokenKind,
    TokenValue,
    UtilityLevel,
)

PROBABILITY_FLOOR = 1e-10

_UTILITY_WEIGHTS = {
    UtilityLevel.U1: -1.0,
    UtilityLevel.U2: -0.5,
    UtilityLevel.U3: 0.0,
    UtilityLevel.U4: 0.5,
    UtilityLevel.U5: 1.0,
}


@dataclass(frozen=True)
class TokenDistribution:
    """Probability mass over one token kind's vocabulary.

    Keys must belong to the kind's vocabulary and values must be finite and
    non-negative; missing values are treated as the smoothing floor. The
    distribution need not be normalized.
    """

    kind: TokenKind
    probs: Mapping[TokenValue, float]

    def __post_init__(self) -> None:
        vocabulary = set(VOCABULARY[self.kind])
        for value, prob in self.probs.items():
            if value not in vocabulary:
                raise ValueError(f"{value!r} is not in the {self.kind.value} vocabulary")
            if not math.isfinite(prob) or prob < 0.0:
                raise ValueError(f"probability for {value!r} must be finite and >= 0")
        if sum(self.smoothed().values()) <= 0.0:
            raise ValueError(f"{self.kind.value} distribution has no mass after smoothing")

    def smoothed(self) -> dict[TokenValue, float]:
        return {
            value: float(self.probs.get(value, PROBABILITY_FLOOR))
            for value in VOCABULARY[self.kind]
        }


@dataclass(frozen=True)
class CritiqueWeights:
    w_rel: float = 1.0
    w_sup: float = 1.0
    w_use: float = 1.0

    def __post_init__(self) -> None:
        for value in (self.w_rel, self.w_sup, self.w_use):
            if not math.isfinite(value):
                raise InvalidConfigError("critique weights must be finite")


@dataclass(frozen=True)
class AdaptiveGateConfig:
    delta: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.delta <= 1.0:
            raise InvalidConfigError("delta must lie in [0, 1]")


class GateDecision(Enum):
    RETRIEVE = "Retrieve"
    NO_RETRIEVE = "NoRetrieve"


@dataclass(frozen=True)
class CandidateScore:
    """Critique components plus the fused candidate score.

    ``s_rel``/``s_sup`` are None for candidates generated without evidence; the
    critique then sums only the present components.
    """

    s_rel: float | None
    s_sup: float | None
    s_use: float
    critique: float
    lm_logprob_mean: float
    combined: float


def _require_kind(dist: TokenDistribution, kind: TokenKind) -> None:
    if dist.kind is not kind:
        raise WrongKindError(f"expected a {kind.value} distribution, got {dist.kind.value}")


def score_rel(dist: TokenDistribution) -> float:
    """Normalized probability of Relevant; in [0, 1]."""
    _require_kind(dist, TokenKind.REL)
    probs = dist.smoothed()
    relevant = probs[RelevanceLabel.RELEVANT]
    return relevant / (relevant + probs[RelevanceLabel.IRRELEVANT])


def score_sup(dist: TokenDistribution) -> float:
    """Support score with Fully=1 and Partially=0.5; in [0, 1]."""
    _require_kind(dist, TokenKind.SUP)
    probs = dist.smoothed()
    total = probs[SupportLabel.FULLY] + probs[SupportLabel.PARTIALLY] + probs[SupportLabel.NONE]
    return (probs[SupportLabel.FULLY] + 0.5 * probs[SupportLabel.PARTIALLY]) / total


def score_use(dist: TokenDistribution) -> float:
    """Utility expectation under weights (-1, -0.5, 0, 0.5, 1); in [-1, 1]."""
    _require_kind(dist, TokenKind.USE)
    probs = dist.smoothed()
    total = sum(probs.values())
    return sum(_UTILITY_WEIGHTS[level] * probs[level] / total for level in UtilityLevel)


def score_critique(
    s_rel: float | None,
    s_sup: float | None,
    s_use: float,
    weights: CritiqueWeights,
) -> float:
    """Weighted sum of the present component scores."""
    total = weights.w_use * s_use
    if s_rel is not None:
        total += weights.w_rel * s_rel
    if s_sup is not None:
        total += weights.w_sup * s_sup
    return total


def retrieval_ratio(dist: TokenDistribution) -> float:
    """Normalized retrieve probability; Continue mass is excluded."""
    _require_kind(dist, TokenKind.RET)
    probs = dist.smoothed()
    yes = probs[RetrievalDecision.RETRIEVAL]
    no = probs[RetrievalDecision.NO_RETRIEVAL]
    if yes + no <= 0.0:
        raise DegenerateDistributionError(
            "retrieve/no-retrieve mass is zero after smoothing"
        )
    return yes / (yes + no)


def adaptive_gate(dist: TokenDistribution, cfg: AdaptiveGateConfig) -> GateDecision:
    """Retrieve exactly when the retrieve ratio strictly exceeds delta."""
    if retrieval_ratio(dist) > cfg.delta:
        return GateDecision.RETRIEVE
    return GateDecision.NO_RETRIEVE


def combined_score(critique: float, lm_logprob_mean: float, lambda_lm: float = 1.0) -> float:
    """Fuse the critique with the mean per-token log-probability."""
    return lambda_lm * lm_logprob_mean + critique


def make_candidate_score(
    s_rel: float | None,
    s_sup: float | None,
    s_use: float,
    lm_logprob_mean: float,
    weights: CritiqueWeights,
    lambda_lm: float,
) -> CandidateScore:
    critique = score_critique(s_rel, s_sup, s_use, weights)
    return CandidateScore(
        s_rel=s_rel,
        s_sup=s_sup,
        s_use=s_use,
        critique=critique,
        lm_logprob_mean=lm_logprob_mean,
        combined=combined_score(critique, lm_logprob_mean, lambda_lm),
    )


@dataclass(frozen=True)
class ScoringConfig:
    """Decoding-time knobs: critique weights, gate threshold, LM fusion."""

    weights: CritiqueWeights = CritiqueWeights()
    gate: AdaptiveGateConfig = AdaptiveGateConfig()
    lambda_lm: float = 1.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.lambda_lm):
            raise InvalidConfigError("lambda_lm must be finite")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ScoringConfig":
        known = {"weights", "delta", "lambda_lm"}
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfigError(f"unknown scoring config keys: {sorted(unknown)}")
        weights_raw = dict(raw.get("weights", {}))
        unknown_weights = set(weights_raw) - {"rel", "sup", "use"}
        if unknown_weights:
            raise InvalidConfigError(f"unknown weight keys: {sorted(unknown_weights)}")
        weights = CritiqueWeights(
            w_rel=float(weights_raw.get("rel", 1.0)),
            w_sup=float(weights_raw.get("sup", 1.0)),
            w_use=float(weights_raw.get("use", 1.0)),
        )
        return cls(
            weights=weights,
            gate=AdaptiveGateConfig(delta=float(raw.get("delta", 0.2))),
            lambda_lm=float(raw.get("lambda_lm", 1.0)),
        )

    def to_dict(self) -> dict:
        return {
            "weights": {
                "rel": self.weights.w_rel,
                "sup": self.weights.w_sup,
                "use": self.weights.w_use,
            },
            "delta": self.gate.delta,
            "lambda_lm": self.lambda_lm,
        }
