"""Exact, mergeable n-gram counting over token corpora plus frequency analyses.

Grams of order 1..3 are packed into a single 63-bit integer key (21 bits per
token), counted per document so no gram spans a document boundary. Counters
merge by pointwise addition, which makes sharded counting deterministic, and
can be spilled to sorted snapshot files and k-way merged when a corpus's gram
table would not fit in memory.
"""

from __future__ import annotations

import heapq
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import corpus as corpus_io
from .errors import EmptyTraceSet, InvalidOrder, OrderMismatch, ParseError, TokenOutOfRange
from .fileio import atomic_writer, parallel_map
from .traces import TraceSet

TOKEN_BITS = 21
MAX_PACKED_TOKEN = (1 << TOKEN_BITS) - 1

SNAPSHOT_MAGIC = b"NGCT"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")  # magic, version, order, entry count
_DOC_BATCH = 512


def pack_gram(tokens: Sequence[int]) -> int:
    key = 0
    for tok in tokens:
        if not 0 <= tok <= MAX_PACKED_TOKEN:
            raise TokenOutOfRange(f"token {tok} not packable into {TOKEN_BITS} bits")
        key = (key << TOKEN_BITS) | tok
    return key


def unpack_gram(key: int, order: int) -> tuple[int, ...]:
    out = []
    for _ in range(order):
        out.append(key & MAX_PACKED_TOKEN)
        key >>= TOKEN_BITS
    return tuple(reversed(out))


def _check_order(order: int):
    if order not in (1, 2, 3):
        raise InvalidOrder(f"order must be 1, 2 or 3, got {order}")


@dataclass
class NgramCounter:
    """Map from packed gram key to count; immutable by convention once built."""

    order: int
    counts: dict[int, int] = field(default_factory=dict)
    total_tokens_seen: int = 0
    num_documents: int = 0

    def __post_init__(self):
        _check_order(self.order)

    def frequency(self, gram: Sequence[int]) -> int:
        """Stored count of a gram, 0 when absent."""

        if len(gram) != self.order:
            raise OrderMismatch(
                f"gram of order {len(gram)} queried against order-{self.order} counter")
        return self.counts.get(pack_gram(gram), 0)

    def __len__(self) -> int:
        return len(self.counts)


def _window_keys(doc: np.ndarray, order: int) -> np.ndarray:
    """Packed keys of every length-`order` window in one document."""

    n = doc.size - order + 1
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    keys = doc[:n].copy()
    for j in range(1, order):
        keys <<= TOKEN_BITS
        keys |= doc[j:n + j]
    return keys


def _count_batch(docs: list[np.ndarray], order: int, vocab_size: int | None) -> tuple[dict[int, int], int, int]:
    counts: dict[int, int] = {}
    tokens = 0
    for doc in docs:
        if doc.size == 0:
            continue
        lo, hi = int(doc.min()), int(doc.max())
        if lo < 0 or hi > MAX_PACKED_TOKEN or (vocab_size is not None and hi >= vocab_size):
            bound = vocab_size if vocab_size is not None else MAX_PACKED_TOKEN + 1
            raise TokenOutOfRange(f"token {hi if hi >= bound else lo} outside [0, {bound})")
        tokens += doc.size
        keys, reps = np.unique(_window_keys(doc, order), return_counts=True)
        for k, c in zip(keys.tolist(), reps.tolist()):
            counts[k] = counts.get(k, 0) + c
    return counts, tokens, len(docs)


def _batched(docs: Iterable[np.ndarray], size: int) -> Iterator[list[np.ndarray]]:
    batch: list[np.ndarray] = []
    for doc in docs:
        batch.append(doc)
        if len(batch) >= size:
            yield batch
            batch = []
    if batch:
        yield batch


def count_ngrams(
    corpus: Iterable[Sequence[int]] | str,
    order: int,
    vocab_size: int | None = None,
    max_memory_entries: int | None = None,
    spill_dir: str | None = None,
    threads: int = 1,
) -> NgramCounter:
    """Count every length-`order` window within each document of a corpus.

    `corpus` is either an iterable of token documents or a path to the binary
    corpus format. When `max_memory_entries` is set, partial tables exceeding
    the budget are spilled to sorted snapshot files and k-way merged at the
    end, bounding peak memory during the counting pass.
    """

    _check_order(order)
    if isinstance(corpus, str):
        if vocab_size is None:
            vocab_size = corpus_io.read_corpus_meta(corpus)
        docs: Iterable[np.ndarray] = corpus_io.iter_corpus(corpus, vocab_size)
    else:
        docs = (np.asarray(d, dtype=np.int64) for d in corpus)

    counter = NgramCounter(order=order)
    spills: list[str] = []
    try:
        batches = _batched(docs, _DOC_BATCH)
        results = parallel_map(
            lambda batch: _count_batch(batch, order, vocab_size), batches, threads)
        for part, tokens, n_docs in results:
            dest = counter.counts
            for k, c in part.items():
                dest[k] = dest.get(k, 0) + c
            counter.total_tokens_seen += tokens
            counter.num_documents += n_docs
            if max_memory_entries is not None and len(dest) > max_memory_entries:
                spills.append(_spill(counter, spill_dir))
        if spills:
            if counter.counts:
                spills.append(_spill(counter, spill_dir))
            merged: dict[int, int] = {}
            for key, count in merge_snapshot_streams(spills):
                merged[key] = count
            counter.counts = merged
        return counter
    finally:
        for path in spills:
            if os.path.exists(path):
                os.unlink(path)


def _spill(counter: NgramCounter, spill_dir: str | None) -> str:
    fd, path = tempfile.mkstemp(prefix="ngrams-spill-", suffix=".ngct", dir=spill_dir)
    os.close(fd)
    save_counter(counter, path, sidecar=False)
    counter.counts = {}
    return path


def merge_counters(a: NgramCounter, b: NgramCounter) -> NgramCounter:
    """Pointwise sum; commutative and associative, enabling sharded counting."""

    if a.order != b.order:
        raise OrderMismatch(f"cannot merge order {a.order} with order {b.order}")
    counts = dict(a.counts)
    for k, c in b.counts.items():
        counts[k] = counts.get(k, 0) + c
    return NgramCounter(
        order=a.order,
        counts=counts,
        total_tokens_seen=a.total_tokens_seen + b.total_tokens_seen,
        num_documents=a.num_documents + b.num_documents,
    )


# --- snapshot persistence ----------------------------------------------------

def save_counter(counter: NgramCounter, path: str, sidecar: bool = True) -> None:
    """Write the sorted (packed_key, count) snapshot; byte-identical per input."""

    keys = np.fromiter(counter.counts.keys(), dtype=np.uint64, count=len(counter.counts))
    order_idx = np.argsort(keys, kind="stable")
    keys = keys[order_idx]
    values = np.fromiter(counter.counts.values(), dtype=np.uint64,
                         count=len(counter.counts))[order_idx]
    pairs = np.empty(2 * keys.size, dtype="<u8")
    pairs[0::2] = keys
    pairs[1::2] = values
    with atomic_writer(path) as fp:
        fp.write(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, counter.order, keys.size))
        fp.write(pairs.tobytes())
    if sidecar:
        with atomic_writer(meta_path(path), text=True) as fp:
            fp.write(f"total_tokens={counter.total_tokens_seen}\n")
            fp.write(f"documents={counter.num_documents}\n")


def meta_path(path: str) -> str:
    return path + ".meta"


def _read_header(fp, path: str) -> tuple[int, int]:
    head = fp.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ParseError(f"{path}: truncated snapshot header")
    magic, version, order, n_entries = _HEADER.unpack(head)
    if magic != SNAPSHOT_MAGIC:
        raise ParseError(f"{path}: bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise ParseError(f"{path}: unsupported snapshot version {version}")
    _check_order(order)
    return order, n_entries


def load_counter(path: str) -> NgramCounter:
    """Read a snapshot back into memory; totals come from the sidecar if present."""

    with open(path, "rb") as fp:
        order, n_entries = _read_header(fp, path)
        data = np.frombuffer(fp.read(16 * n_entries), dtype="<u8")
        if data.size != 2 * n_entries:
            raise ParseError(f"{path}: snapshot shorter than its header claims")
    counts = dict(zip(data[0::2].tolist(), data[1::2].tolist()))
    total = sum(counts.values()) if order == 1 else 0
    n_docs = 0
    side = meta_path(path)
    if os.path.exists(side):
        with open(side, "r", encoding="utf-8") as fp:
            for line in fp:
                key, _, value = line.strip().partition("=")
                if key == "total_tokens":
                    total = int(value)
                elif key == "documents":
                    n_docs = int(value)
    return NgramCounter(order=order, counts=counts,
                        total_tokens_seen=total, num_documents=n_docs)


def iter_snapshot(path: str, chunk_entries: int = 1 << 16) -> Iterator[tuple[int, int]]:
    """Stream (key, count) pairs from a snapshot without loading it whole."""

    with open(path, "rb") as fp:
        _, n_entries = _read_header(fp, path)
        remaining = n_entries
        while remaining > 0:
            take = min(chunk_entries, remaining)
            data = np.frombuffer(fp.read(16 * take), dtype="<u8")
            if data.size != 2 * take:
                raise ParseError(f"{path}: snapshot shorter than its header claims")
            yield from zip(data[0::2].tolist(), data[1::2].tolist())
            remaining -= take


def merge_snapshot_streams(paths: Sequence[str]) -> Iterator[tuple[int, int]]:
    """K-way merge of sorted snapshots, summing counts of equal keys."""

    merged = heapq.merge(*(iter_snapshot(p) for p in paths))
    current_key: int | None = None
    current_count = 0
    for key, count in merged:
        if key == current_key:
            current_count += count
        else:
            if current_key is not None:
                yield current_key, current_count
            current_key, current_count = key, count
    if current_key is not None:
        yield current_key, current_count


# --- frequency analyses over traces -------------------------------------------

@dataclass(frozen=True)
class IndexProfile:
    """Mean gram frequency at each absolute index of context + continuation."""

    group: str
    order: int
    per_index_mean: tuple[float | None, ...]


@dataclass(frozen=True)
class SequenceGramStats:
    """Cohort-level frequency averages and the boundary frequency difference."""

    group: str
    order: int
    avg_context_freq: float
    avg_continuation_freq: float
    boundary_diff: float
    n_traces: int


def _trace_window_counts(trace, counter: NgramCounter, use_generated: bool) -> np.ndarray:
    continuation = trace.generated_continuation if use_generated else trace.true_continuation
    seq = np.asarray(trace.context + continuation, dtype=np.int64)
    if seq.max() > MAX_PACKED_TOKEN or seq.min() < 0:
        raise TokenOutOfRange("trace tokens exceed packable range")
    keys = _window_keys(seq, counter.order)
    get = counter.counts.get
    return np.array([get(k, 0) for k in keys.tolist()], dtype=np.float64)


def index_profile(
    traces: TraceSet,
    counter: NgramCounter,
    group: str = "",
    use_generated: bool = False,
    threads: int = 1,
) -> IndexProfile:
    """Mean over traces of the frequency of the gram ending at each index.

    Indices with fewer than order-1 predecessors have no full window and are
    reported as absent (None). Continuation tokens default to the true
    continuation; `use_generated` switches to the decoded tokens.
    """

    if len(traces) == 0:
        raise EmptyTraceSet("cannot profile an empty trace set")
    n = counter.order
    if n > traces.context_len:
        raise OrderMismatch(
            f"order {n} exceeds context length {traces.context_len}")
    rows = list(parallel_map(
        lambda t: _trace_window_counts(t, counter, use_generated), traces, threads))
    stacked = np.vstack(rows)
    means = stacked.mean(axis=0)
    absent: list[float | None] = [None] * (n - 1)
    return IndexProfile(group=group, order=n,
                        per_index_mean=tuple(absent) + tuple(float(m) for m in means))


def sequence_gram_stats(
    traces: TraceSet,
    counter: NgramCounter,
    group: str = "",
    use_generated: bool = False,
    threads: int = 1,
) -> SequenceGramStats:
    """Context/continuation frequency averages plus the boundary difference.

    The boundary difference is the mean over traces of the frequency of the
    gram ending at the first continuation token minus the frequency of the
    gram ending at the last context token; its sign is the point.
    """

    if len(traces) == 0:
        raise EmptyTraceSet("cannot compute gram stats on an empty trace set")
    n = counter.order
    ctx_len = traces.context_len
    if n > ctx_len:
        raise OrderMismatch(f"order {n} exceeds context length {ctx_len}")
    rows = list(parallel_map(
        lambda t: _trace_window_counts(t, counter, use_generated), traces, threads))
    stacked = np.vstack(rows)
    # column j holds the window ending at absolute index j + n - 1
    boundary_col = ctx_len - (n - 1)
    context_cols = stacked[:, :boundary_col]
    continuation_cols = stacked[:, boundary_col:]
    boundary = stacked[:, boundary_col] - stacked[:, boundary_col - 1]
    return SequenceGramStats(
        group=group,
        order=n,
        avg_context_freq=float(context_cols.mean()),
        avg_continuation_freq=float(continuation_cols.mean()),
        boundary_diff=float(boundary.mean()),
        n_traces=len(traces),
    )
