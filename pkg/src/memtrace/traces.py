"""Portable generation-trace data model and line-delimited JSON ingestion.

A trace records one scored example: the context fed to a model, the true and
greedy-decoded continuations, per-step decoding entropy (nats) and optional
per-step last-layer embeddings. The file format is one JSON object per line
(UTF-8), so files from different backends can be concatenated freely.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import IO, Any, Iterable, Iterator, Mapping

from .errors import (
    BadDecodeMode,
    EntropyOutOfRange,
    LengthMismatch,
    MemtraceError,
    ParseError,
    TokenOutOfRange,
)

SCHEMA_VERSION = 1
ENTROPY_SLACK = 1e-9


@dataclass(frozen=True)
class ModelMeta:
    """Identity of the model that produced a trace; label is a grouping key."""

    label: str
    vocab_size: int
    hidden_size: int

    def __post_init__(self):
        if not self.label:
            raise ParseError("model label must be non-empty")
        if self.vocab_size < 2:
            raise ParseError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.hidden_size < 1:
            raise ParseError(f"hidden_size must be >= 1, got {self.hidden_size}")


@dataclass(frozen=True)
class GenerationTrace:
    """One greedy-decoded example, immutable and safe to share across threads."""

    sequence_id: str
    corpus_index: int
    model: ModelMeta
    context: tuple[int, ...]
    true_continuation: tuple[int, ...]
    generated_continuation: tuple[int, ...]
    step_entropy: tuple[float, ...]
    step_embedding: tuple[tuple[float, ...], ...] | None = None
    decode_mode: str = "greedy"
    context_entropy: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("context", "true_continuation", "generated_continuation",
                     "step_entropy", "context_entropy"):
            val = getattr(self, name)
            if val is not None and not isinstance(val, tuple):
                object.__setattr__(self, name, tuple(val))
        if self.step_embedding is not None:
            object.__setattr__(
                self, "step_embedding",
                tuple(tuple(float(x) for x in vec) for vec in self.step_embedding))
        self._validate()

    def _validate(self):
        if self.decode_mode != "greedy":
            raise BadDecodeMode(f"decode_mode must be 'greedy', got {self.decode_mode!r}")
        if self.corpus_index < 0:
            raise ParseError(f"corpus_index must be >= 0, got {self.corpus_index}")
        if not self.context:
            raise LengthMismatch("context must be non-empty")
        n = len(self.true_continuation)
        if n < 1:
            raise LengthMismatch("continuation must have at least one token")
        if len(self.generated_continuation) != n:
            raise LengthMismatch(
                f"generated_continuation has {len(self.generated_continuation)} "
                f"tokens but true_continuation has {n}")
        if len(self.step_entropy) != n:
            raise LengthMismatch(
                f"step_entropy has {len(self.step_entropy)} values for {n} tokens")
        vocab = self.model.vocab_size
        for part in (self.context, self.true_continuation, self.generated_continuation):
            for tok in part:
                if not 0 <= tok < vocab:
                    raise TokenOutOfRange(f"token {tok} outside [0, {vocab})")
        cap = math.log(vocab) + ENTROPY_SLACK
        for e in self.step_entropy:
            if not (0.0 <= e <= cap) or not math.isfinite(e):
                raise EntropyOutOfRange(f"entropy {e} outside [0, ln({vocab})]")
        if self.step_embedding is not None:
            if len(self.step_embedding) != n:
                raise LengthMismatch(
                    f"step_embedding has {len(self.step_embedding)} vectors for {n} tokens")
            for vec in self.step_embedding:
                if len(vec) != self.model.hidden_size:
                    raise LengthMismatch(
                        f"embedding vector length {len(vec)} != hidden_size "
                        f"{self.model.hidden_size}")
        if self.context_entropy is not None:
            if len(self.context_entropy) != len(self.context):
                raise LengthMismatch(
                    f"context_entropy has {len(self.context_entropy)} values for "
                    f"{len(self.context)} context tokens")
            for e in self.context_entropy:
                if not (0.0 <= e <= cap) or not math.isfinite(e):
                    raise EntropyOutOfRange(f"context entropy {e} outside [0, ln({vocab})]")

    @property
    def context_len(self) -> int:
        return len(self.context)

    @property
    def continuation_len(self) -> int:
        return len(self.true_continuation)


@dataclass(frozen=True)
class TraceSet:
    """An ordered collection of traces sharing context and continuation lengths."""

    traces: tuple[GenerationTrace, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not isinstance(self.traces, tuple):
            object.__setattr__(self, "traces", tuple(self.traces))
        seen: set[str] = set()
        ctx_len = cont_len = None
        for t in self.traces:
            if t.sequence_id in seen:
                raise ParseError(f"duplicate sequence_id {t.sequence_id!r}")
            seen.add(t.sequence_id)
            if ctx_len is None:
                ctx_len, cont_len = t.context_len, t.continuation_len
            elif (t.context_len, t.continuation_len) != (ctx_len, cont_len):
                raise LengthMismatch(
                    f"trace {t.sequence_id!r} has lengths "
                    f"({t.context_len}, {t.continuation_len}), set has ({ctx_len}, {cont_len})")

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self) -> Iterator[GenerationTrace]:
        return iter(self.traces)

    def __getitem__(self, i) -> GenerationTrace:
        return self.traces[i]

    @property
    def context_len(self) -> int:
        if not self.traces:
            raise MemtraceError("empty trace set has no context length")
        return self.traces[0].context_len

    @property
    def continuation_len(self) -> int:
        if not self.traces:
            raise MemtraceError("empty trace set has no continuation length")
        return self.traces[0].continuation_len


def _require(raw: Mapping[str, Any], key: str, kind, line_no: int | None = None):
    if key not in raw:
        raise ParseError(f"missing field {key!r}", line_no)
    val = raw[key]
    if kind is int and isinstance(val, bool):
        raise ParseError(f"field {key!r} must be {kind.__name__}", line_no)
    if not isinstance(val, kind):
        raise ParseError(f"field {key!r} must be {kind.__name__}", line_no)
    return val


def _int_list(raw: Mapping[str, Any], key: str, line_no: int | None = None) -> list[int]:
    val = _require(raw, key, list, line_no)
    for x in val:
        if not isinstance(x, int) or isinstance(x, bool):
            raise ParseError(f"field {key!r} must contain integers", line_no)
    return val


def _float_list(val: Any, key: str, line_no: int | None = None) -> list[float]:
    if not isinstance(val, list):
        raise ParseError(f"field {key!r} must be an array", line_no)
    out = []
    for x in val:
        if not isinstance(x, (int, float)) or isinstance(x, bool):
            raise ParseError(f"field {key!r} must contain numbers", line_no)
        out.append(float(x))
    return out


def validate_trace(raw: Mapping[str, Any], line_no: int | None = None) -> GenerationTrace:
    """Decode one record (already JSON-parsed) into a validated GenerationTrace."""

    version = _require(raw, "schema_version", int, line_no)
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {version}", line_no)
    model_raw = _require(raw, "model", dict, line_no)
    model = ModelMeta(
        label=_require(model_raw, "label", str, line_no),
        vocab_size=_require(model_raw, "vocab_size", int, line_no),
        hidden_size=_require(model_raw, "hidden_size", int, line_no),
    )
    embedding = None
    if raw.get("step_embedding") is not None:
        emb_raw = _require(raw, "step_embedding", list, line_no)
        embedding = tuple(
            tuple(_float_list(vec, "step_embedding", line_no)) for vec in emb_raw)
    ctx_entropy = None
    if raw.get("context_entropy") is not None:
        ctx_entropy = tuple(_float_list(raw["context_entropy"], "context_entropy", line_no))
    try:
        return GenerationTrace(
            sequence_id=_require(raw, "sequence_id", str, line_no),
            corpus_index=_require(raw, "corpus_index", int, line_no),
            model=model,
            context=tuple(_int_list(raw, "context", line_no)),
            true_continuation=tuple(_int_list(raw, "true_continuation", line_no)),
            generated_continuation=tuple(_int_list(raw, "generated_continuation", line_no)),
            step_entropy=tuple(_float_list(
                _require(raw, "step_entropy", list, line_no), "step_entropy", line_no)),
            step_embedding=embedding,
            decode_mode=_require(raw, "decode_mode", str, line_no),
            context_entropy=ctx_entropy,
        )
    except MemtraceError as err:
        if line_no is not None and err.line_no is None:
            raise type(err)(err.args[0], line_no) from None
        raise


def trace_to_record(trace: GenerationTrace) -> dict[str, Any]:
    """Canonical JSON-ready form of a trace; field order is fixed."""

    rec: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "sequence_id": trace.sequence_id,
        "corpus_index": trace.corpus_index,
        "model": {
            "label": trace.model.label,
            "vocab_size": trace.model.vocab_size,
            "hidden_size": trace.model.hidden_size,
        },
        "context": list(trace.context),
        "true_continuation": list(trace.true_continuation),
        "generated_continuation": list(trace.generated_continuation),
        "step_entropy": list(trace.step_entropy),
        "decode_mode": trace.decode_mode,
    }
    if trace.step_embedding is not None:
        rec["step_embedding"] = [list(v) for v in trace.step_embedding]
    if trace.context_entropy is not None:
        rec["context_entropy"] = list(trace.context_entropy)
    return rec


def write_traces(fp: IO[str], traces: Iterable[GenerationTrace]) -> int:
    """Write traces as JSON Lines; returns the number written."""

    n = 0
    for trace in traces:
        fp.write(json.dumps(trace_to_record(trace), separators=(",", ":")))
        fp.write("\n")
        n += 1
    return n


def read_trace_stream(source: IO[str] | IO[bytes] | str) -> Iterator[GenerationTrace]:
    """Lazily yield validated traces from a JSON Lines stream, in file order.

    Any malformed line raises immediately with its 1-based line number; nothing
    is skipped silently.
    """

    if isinstance(source, str):
        with open(source, "rb") as fp:
            yield from read_trace_stream(fp)
        return
    stream: IO[str]
    if isinstance(source, io.TextIOBase):
        stream = source
    else:
        stream = io.TextIOWrapper(source, encoding="utf-8")  # type: ignore[arg-type]
    for line_no, line in enumerate(stream, start=1):
        line = line.rstrip("\n")
        if not line:
            raise ParseError("empty line", line_no)
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as err:
            raise ParseError(f"invalid JSON: {err.msg}", line_no) from None
        if not isinstance(raw, dict):
            raise ParseError("record is not an object", line_no)
        yield validate_trace(raw, line_no)


def load_trace_set(paths: Iterable[str] | str) -> TraceSet:
    """Read one or more trace files into a single TraceSet."""

    if isinstance(paths, str):
        paths = [paths]
    traces: list[GenerationTrace] = []
    for path in paths:
        traces.extend(read_trace_stream(path))
    return TraceSet(tuple(traces))
