"""Exception hierarchy shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfigError(EngineError):
    """A configuration value violates its documented constraints."""


class UnclosedParagraphError(EngineError):
    """A <paragraph> marker has no matching closing marker."""


class WrongKindError(EngineError):
    """A token distribution of the wrong kind was passed to a scorer."""


class DegenerateDistributionError(EngineError):
    """The yes/no mass of a retrieval-decision distribution is zero."""


class DimensionMismatchError(EngineError):
    """Embedder and index dimensions disagree."""


class EmptyCorpusError(EngineError):
    """An index build was attempted over zero chunks."""


class NotEnoughInstancesError(EngineError):
    """A sample or neighbor count exceeds the pool size."""


class IdMismatchError(EngineError):
    """Traces and gold records cannot be aligned by id."""


class WrongRoleError(EngineError):
    """A backend with the wrong role was passed to a pipeline stage."""


class BackendError(EngineError):
    """Base class for model-backend failures."""


class UnscriptedPromptError(BackendError):
    """The mock backend has no script entry for a prompt."""


class BackendTimeoutError(BackendError):
    """A backend request exceeded its deadline."""


class TransportError(BackendError):
    """A backend request failed at the transport level (retryable)."""


class ProtocolViolationError(BackendError):
    """A backend reply violated the wire contract (not retryable)."""
