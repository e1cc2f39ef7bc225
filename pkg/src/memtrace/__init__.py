"""Toolkit for measuring verbatim memorization in LM generation traces."""

from .scoring import (
    MemorizationBinning,
    MemorizationScore,
    bin_score,
    histogram_by_bin,
    memorization_score,
    score_trace,
    transition_matrix,
)
from .traces import GenerationTrace, ModelMeta, TraceSet, read_trace_stream, validate_trace

__version__ = "0.1.0"

__all__ = [
    "GenerationTrace",
    "MemorizationBinning",
    "MemorizationScore",
    "ModelMeta",
    "TraceSet",
    "bin_score",
    "histogram_by_bin",
    "memorization_score",
    "read_trace_stream",
    "score_trace",
    "transition_matrix",
    "validate_trace",
    "__version__",
]
