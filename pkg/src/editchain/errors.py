"""Exception taxonomy shared across the package.

Every error raised on purpose derives from EditChainError so callers can
catch the package's failures without swallowing programming mistakes.
"""

from __future__ import annotations


class EditChainError(Exception):
    """Base class for all deliberate failures in this package."""


# --- imaging ---------------------------------------------------------------

class DimensionMismatch(EditChainError):
    """Two buffers that must share dimensions do not."""


class EmptyList(EditChainError):
    """An operation requiring a non-empty list received an empty one."""


class UnsupportedFormat(EditChainError):
    """Image file is not 8-bit RGB/RGBA (or 1/8-bit grayscale for masks)."""


# --- instructions ----------------------------------------------------------

class NoTemplateForKind(EditChainError):
    """Template registry has no entry for the requested attribute kind."""


class DuplicateAttribute(EditChainError):
    """Two edits in one instruction target the same attribute kind."""


class EmptyEditList(EditChainError):
    """A compound instruction needs at least one edit."""


class UnknownChangeToken(EditChainError):
    """A change token is not in the vocabulary registered for its kind."""


# --- decomposer ------------------------------------------------------------

class MalformedOutput(EditChainError):
    """Completion text contains no parseable instruction items."""


class CountMismatch(EditChainError):
    """Parsed item count differs from the expected attribute count."""


class DecompositionFailed(EditChainError):
    """All completion retries exhausted without a valid chain."""

    def __init__(self, message: str, raw_response: str = "") -> None:
        super().__init__(message)
        self.raw_response = raw_response


class UnsplittableInstruction(EditChainError):
    """Rule-based splitting found no fragment with a known attribute."""


# --- backends --------------------------------------------------------------

class BackendUnavailable(EditChainError):
    """Transport failure or 5xx persisting through the retry budget."""


class BackendRejected(EditChainError):
    """A 4xx response; the request is wrong and must not be retried."""

    def __init__(self, message: str, status_code: int = 400, code: str = "") -> None:
        super().__init__(message)
        self.status_code = status_code
        self.code = code


class ProtocolError(EditChainError):
    """Response violated the wire schema or a declared value range."""


class NotSyntheticFace(EditChainError):
    """Image cannot be decoded under the banded mock-face convention."""


class BothOrNeitherInput(EditChainError):
    """Embedder needs exactly one of text or image."""


# --- metrics ---------------------------------------------------------------

class EmptyInput(EditChainError):
    """Aggregation over zero samples is undefined."""


class UnknownBaseline(EditChainError):
    """Requested baseline tag matches no result group."""


# --- dataset / harness -----------------------------------------------------

class LayoutError(EditChainError):
    """Annotation or corpus directory does not follow the documented layout."""


class AmbiguousPart(EditChainError):
    """A mask filename matches more than one registered part name."""


class MissingMask(EditChainError):
    """No mask available for the attribute a triplet needs."""


class InsufficientFaces(EditChainError):
    """Fewer faces pass the quality floor than the test set requires."""


class MixedTestsets(EditChainError):
    """Results computed on different test-set manifests refuse to merge."""
