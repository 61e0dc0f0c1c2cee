"""Model-backend abstraction: a deterministic scripted mock and an HTTP client.

Wire protocol (UTF-8 JSON, no trailing data):

* request: ``POST {base_url}/v1/generate`` with body
  ``{"prompt": str, "max_tokens": int, "stop": [str],
  "want_control_probs": ["RET", "REL", "SUP", "USE"]}``;
* response: ``{"text": str, "control_probs": [{"kind": str,
  "probs": {surface_form: float}}], "token_logprobs": [float]}``.

``control_probs`` carries one distribution per control token occurring in the
response text, in order of occurrence, keyed by the canonical bracketed
surface forms. Probabilities for multi-word control tokens are aggregated by
the serving layer; this client only validates and transports them.

Transport failures (network errors, non-2xx statuses) are retried with
exponential backoff: 250 ms base, doubling per attempt, jitter within ±20%.
Protocol violations are deterministic and never retried.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import requests

from .errors import (
    BackendTimeoutError,
    ProtocolViolationError,
    TransportError,
    UnscriptedPromptError,
)
from .scoring import TokenDistribution
from .tokens import PARSE_TABLE, SURFACE_FORMS, TokenKind, parse_stream

logger = logging.getLogger(__name__)

GENERATE_PATH = "/v1/generate"
BACKOFF_BASE_SECONDS = 0.25
BACKOFF_JITTER = 0.2


class BackendRole(Enum):
    CRITIC = "Critic"
    GENERATOR = "Generator"


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = 1024
    stop: tuple[str, ...] = ()
    want_control_probs: tuple[TokenKind, ...] = ()

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    control_probs: tuple[TokenDistribution, ...] = ()
    token_logprobs: tuple[float, ...] = ()


class ModelBackend(ABC):
    """A language model reachable through generate(); safe for concurrent calls."""

    role: BackendRole

    @abstractmethod
    def generate(self, request: GenerationRequest) -> GenerationResponse: ...


def validate_generation_response(response: GenerationResponse) -> None:
    """Check that control_probs aligns one-to-one with the tokens in text."""
    stream = parse_stream(response.text)
    kinds_in_text = [token.kind for token in stream.tokens()]
    kinds_in_probs = [dist.kind for dist in response.control_probs]
    if kinds_in_text != kinds_in_probs:
        raise ProtocolViolationError(
            "control_probs do not align with the control tokens in text: "
            f"text has {[k.value for k in kinds_in_text]}, "
            f"probs have {[k.value for k in kinds_in_probs]}"
        )


def check_requested_probs(
    request: GenerationRequest, response: GenerationResponse
) -> None:
    """Every requested control-token kind must appear among control_probs."""
    present = {dist.kind for dist in response.control_probs}
    missing = [kind.value for kind in request.want_control_probs if kind not in present]
    if missing:
        raise ProtocolViolationError(
            f"response is missing requested control distributions: {missing}"
        )


def distribution_to_wire(dist: TokenDistribution) -> dict:
    return {
        "kind": dist.kind.value,
        "probs": {SURFACE_FORMS[value]: float(p) for value, p in dist.probs.items()},
    }


def distribution_from_wire(raw: Mapping) -> TokenDistribution:
    try:
        kind = TokenKind(raw["kind"])
    except (KeyError, ValueError) as exc:
        raise ProtocolViolationError(f"bad distribution kind: {raw!r}") from exc
    probs = {}
    for surface, prob in dict(raw.get("probs", {})).items():
        token = PARSE_TABLE.get(surface)
        if token is None or token.kind is not kind:
            raise ProtocolViolationError(
                f"{surface!r} is not a {kind.value} surface form"
            )
        probs[token.value] = float(prob)
    try:
        return TokenDistribution(kind, probs)
    except ValueError as exc:
        raise ProtocolViolationError(str(exc)) from exc


def request_to_wire(request: GenerationRequest) -> dict:
    return {
        "prompt": request.prompt,
        "max_tokens": request.max_tokens,
        "stop": list(request.stop),
        "want_control_probs": [kind.value for kind in request.want_control_probs],
    }


def response_to_wire(response: GenerationResponse) -> dict:
    return {
        "text": response.text,
        "control_probs": [distribution_to_wire(d) for d in response.control_probs],
        "token_logprobs": list(response.token_logprobs),
    }


def response_from_wire(raw: Mapping) -> GenerationResponse:
    if not isinstance(raw, Mapping) or "text" not in raw:
        raise ProtocolViolationError(f"malformed response body: {raw!r}")
    try:
        response = GenerationResponse(
            text=str(raw["text"]),
            control_probs=tuple(
                distribution_from_wire(d) for d in raw.get("control_probs", [])
            ),
            token_logprobs=tuple(float(x) for x in raw.get("token_logprobs", [])),
        )
    except (TypeError, ValueError) as exc:
        raise ProtocolViolationError(f"malformed response body: {exc}") from exc
    validate_generation_response(response)
    return response


class MockBackend(ModelBackend):
    """Deterministic scripted backend for tests and offline runs.

    Lookup is exact-match first, then the longest matching declared prefix.
    Every served response is pre-validated, and calls are recorded (thread
    safe) so tests can assert on traffic.
    """

    def __init__(
        self,
        script: Mapping[str, GenerationResponse] | None = None,
        prefixes: Mapping[str, GenerationResponse] | None = None,
        role: BackendRole = BackendRole.GENERATOR,
    ):
        self.role = role
        self._exact = dict(script or {})
        self._prefixes = dict(prefixes or {})
        for response in list(self._exact.values()) + list(self._prefixes.values()):
            validate_generation_response(response)
        self._lock = threading.Lock()
        self.calls: list[GenerationRequest] = []

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            self.calls.append(request)
        response = self._exact.get(request.prompt)
        if response is None:
            best = None
            for prefix in self._prefixes:
                if request.prompt.startswith(prefix):
                    if best is None or len(prefix) > len(best):
                        best = prefix
            if best is None:
                raise UnscriptedPromptError(
                    f"no script entry for prompt: {request.prompt[:120]!r}"
                )
            response = self._prefixes[best]
        check_requested_probs(request, response)
        return response


def mock_backend(
    script: Mapping[str, GenerationResponse] | None = None,
    prefixes: Mapping[str, GenerationResponse] | None = None,
    role: BackendRole = BackendRole.GENERATOR,
) -> MockBackend:
    return MockBackend(script, prefixes, role)


def load_mock_script(path, role: BackendRole = BackendRole.GENERATOR) -> MockBackend:
    """Load a mock backend from a JSON file.

    Layout: ``{"role": "Generator"|"Critic", "exact": {prompt: response},
    "prefix": {prompt_prefix: response}}`` with responses in wire form.
    """
    with open(path, "r", encoding="utf-8") as handle:
        raw = json.load(handle)
    declared = raw.get("role")
    if declared is not None:
        role = BackendRole(declared)
    script = {p: response_from_wire(r) for p, r in raw.get("exact", {}).items()}
    prefixes = {p: response_from_wire(r) for p, r in raw.get("prefix", {}).items()}
    return MockBackend(script, prefixes, role)


@dataclass
class HttpBackend(ModelBackend):
    """Wire-protocol client with bounded retries on transport failures."""

    base_url: str
    timeout_ms: int = 30000
    max_retries: int = 2
    role: BackendRole = BackendRole.GENERATOR
    bearer_token: str | None = None
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)
    rng: random.Random = field(default_factory=lambda: random.Random(), repr=False)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.bearer_token:
            headers["Authorization"] = f"Bearer {self.bearer_token}"
        return headers

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        url = self.base_url.rstrip("/") + GENERATE_PATH
        body = json.dumps(request_to_wire(request)).encode("utf-8")
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt > 0:
                delay = BACKOFF_BASE_SECONDS * (2 ** (attempt - 1))
                delay *= self.rng.uniform(1.0 - BACKOFF_JITTER, 1.0 + BACKOFF_JITTER)
                logger.debug("retrying %s in %.3fs (attempt %d)", url, delay, attempt)
                self.sleep(delay)
            try:
                reply = requests.post(
                    url,
                    data=body,
                    headers=self._headers(),
                    timeout=self.timeout_ms / 1000.0,
                )
            except requests.Timeout as exc:
                last_error = BackendTimeoutError(f"{url}: {exc}")
                continue
            except requests.RequestException as exc:
                last_error = TransportError(f"{url}: {exc}")
                continue
            if not 200 <= reply.status_code < 300:
                last_error = TransportError(f"{url}: HTTP {reply.status_code}")
                continue
            try:
                payload = reply.json()
            except ValueError as exc:
                raise ProtocolViolationError(f"{url}: body is not JSON: {exc}") from exc
            response = response_from_wire(payload)
            check_requested_probs(request, response)
            return response
        assert last_error is not None
        raise last_error


def http_backend(
    base_url: str,
    timeout_ms: int = 30000,
    max_retries: int = 2,
    role: BackendRole = BackendRole.GENERATOR,
    bearer_token: str | None = None,
) -> HttpBackend:
    return HttpBackend(
        base_url=base_url,
        timeout_ms=timeout_ms,
        max_retries=max_retries,
        role=role,
        bearer_token=bearer_token,
    )


def mean_logprob(response: GenerationResponse) -> float:
    """Mean per-token log-probability; 0.0 when the backend reports none."""
    if not response.token_logprobs:
        return 0.0
    return sum(response.token_logprobs) / len(response.token_logprobs)


def first_distribution(
    response: GenerationResponse, kind: TokenKind
) -> TokenDistribution | None:
    for dist in response.control_probs:
        if dist.kind is kind:
            return dist
    return None


def last_distribution(
    response: GenerationResponse, kind: TokenKind
) -> TokenDistribution | None:
    found = None
    for dist in response.control_probs:
        if dist.kind is kind:
            found = dist
    return found


def script_response(
    text: str,
    distributions: Sequence[TokenDistribution] = (),
    token_logprobs: Sequence[float] = (),
) -> GenerationResponse:
    """Convenience constructor for scripted responses; validates alignment."""
    response = GenerationResponse(
        text=text,
        control_probs=tuple(distributions),
        token_logprobs=tuple(token_logprobs),
    )
    validate_generation_response(response)
    return response
