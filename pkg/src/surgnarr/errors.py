"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class SurgNarrError(Exception):
    """Base class for all package errors."""


class ParseError(SurgNarrError):
    """Malformed input document. ``location`` names the line/offset or JSON path."""

    def __init__(self, message: str, location: str | None = None) -> None:
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class ValidationError(SurgNarrError):
    """Well-formed input that violates a domain invariant."""


class EmptyInputError(SurgNarrError):
    """Input with nothing to process where something is required."""


class EmptySequenceError(EmptyInputError):
    """A record whose timeline has zero duration cannot be interleaved."""


class HierarchyValidationError(ValidationError):
    """Carries every violated hierarchy constraint, not just the first."""

    def __init__(self, violations: list) -> None:
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"{len(self.violations)} hierarchy violation(s): {lines}")


class ClientTransportError(SurgNarrError):
    """Retryable failure talking to an external model service."""

    retryable = True

    def __init__(self, message: str, item_id: str | None = None) -> None:
        self.item_id = item_id
        super().__init__(f"[{item_id}] {message}" if item_id else message)


class CausalityViolation(SurgNarrError):
    """A streaming model tried to see the future or acknowledged out of order."""


class StreamRunError(SurgNarrError):
    """A narration model failed while handling a chunk."""

    def __init__(self, message: str, chunk_index: int) -> None:
        self.chunk_index = chunk_index
        super().__init__(f"chunk {chunk_index}: {message}")
