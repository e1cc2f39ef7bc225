"""Exception types shared across the toolkit.

Every error raised by library code derives from MemtraceError so callers
(and the CLI) can distinguish data problems from genuine bugs. Errors that
surface while reading line-delimited files carry the offending line number.
"""

from __future__ import annotations


class MemtraceError(Exception):
    """Base class for all toolkit errors."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        super().__init__(message if line_no is None else f"line {line_no}: {message}")


# --- trace ingestion ---------------------------------------------------------

class ParseError(MemtraceError):
    """A record could not be decoded from its external representation."""


class LengthMismatch(MemtraceError):
    """Parallel sequences (continuations, entropies, embeddings) disagree in length."""


class TokenOutOfRange(MemtraceError):
    """A token id falls outside [0, vocab_size)."""


class EntropyOutOfRange(MemtraceError):
    """A step entropy is negative or exceeds ln(vocab_size) beyond slack."""


class BadDecodeMode(MemtraceError):
    """Only greedy-decoded traces are supported."""


# --- scoring -----------------------------------------------------------------

class EmptyTraceSet(MemtraceError):
    """An operation requiring at least one trace received none."""


class KeySetMismatch(MemtraceError):
    """Two score maps do not cover the same sequence ids."""


class EmptyInput(MemtraceError):
    """An operation received no usable input."""


class InvalidParts(MemtraceError):
    """Requested partition count is not a positive integer."""


# --- n-gram engine -----------------------------------------------------------

class InvalidOrder(MemtraceError):
    """N-gram order must be 1, 2 or 3."""


class OrderMismatch(MemtraceError):
    """A gram or counter was used with an incompatible order."""


# --- decode dynamics ---------------------------------------------------------

class NotNormalized(MemtraceError):
    """A probability vector does not sum to 1 within tolerance."""


class NegativeMass(MemtraceError):
    """A probability vector contains a negative entry."""


class EmptyGroup(MemtraceError):
    """A cohort required for an analysis has no members."""


class MissingEmbeddings(MemtraceError):
    """An embedding-based analysis was run on traces without step embeddings."""


class DegenerateInput(MemtraceError):
    """All input vectors are identical; no principal directions exist."""


class DimensionTooSmall(MemtraceError):
    """Fewer dimensions (or points) than requested components."""


# --- toy backend -------------------------------------------------------------

class EmptyCorpus(MemtraceError):
    """A model cannot be fit on an empty corpus."""


class SequenceTooShort(MemtraceError):
    """An evaluation sequence is shorter than context + continuation."""


# --- predictor ---------------------------------------------------------------

class EmptyDataset(MemtraceError):
    """Training or evaluation received no sequences."""


class NonFiniteLoss(MemtraceError):
    """Training produced a NaN/Inf loss or parameter."""


class NonFiniteGradient(MemtraceError):
    """Gradient checking encountered a NaN/Inf gradient."""


class DimensionMismatch(MemtraceError):
    """Feature dimension does not match the model."""


# --- CLI ---------------------------------------------------------------------

class ConfigError(MemtraceError):
    """Bad flag value or missing input; message names the flag."""
