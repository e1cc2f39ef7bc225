"""Binary token-corpus format shared by the n-gram engine and the toy backend.

Layout: little-endian unsigned 32-bit token ids, with 0xFFFFFFFF closing each
document. A sidecar text file at `<path>.meta` names the vocabulary size as
`vocab_size=<N>` (one `key=value` per line).
"""

from __future__ import annotations

import os
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ParseError, TokenOutOfRange

DOC_SENTINEL = 0xFFFFFFFF
_CHUNK_TOKENS = 1 << 20


def meta_path(corpus_path: str) -> str:
    return corpus_path + ".meta"


def write_corpus(path: str, documents: Iterable[Sequence[int]], vocab_size: int) -> int:
    """Write documents plus the sidecar header; returns the document count."""

    if vocab_size < 2:
        raise ParseError(f"vocab_size must be >= 2, got {vocab_size}")
    n_docs = 0
    sentinel = np.array([DOC_SENTINEL], dtype="<u4")
    with open(path, "wb") as fp:
        for doc in documents:
            arr = np.asarray(doc, dtype=np.int64)
            if arr.size == 0:
                continue
            if arr.min() < 0 or arr.max() >= vocab_size:
                raise TokenOutOfRange(
                    f"document {n_docs} has tokens outside [0, {vocab_size})")
            fp.write(arr.astype("<u4").tobytes())
            fp.write(sentinel.tobytes())
            n_docs += 1
    with open(meta_path(path), "w", encoding="utf-8") as fp:
        fp.write(f"vocab_size={vocab_size}\n")
    return n_docs


def read_corpus_meta(path: str) -> int:
    """Vocab size from the sidecar header of a corpus file."""

    side = meta_path(path)
    if not os.path.exists(side):
        raise ParseError(f"missing corpus sidecar {side}")
    vocab_size = None
    with open(side, "r", encoding="utf-8") as fp:
        for line in fp:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            if key.strip() == "vocab_size":
                try:
                    vocab_size = int(value.strip())
                except ValueError:
                    raise ParseError(f"bad vocab_size in {side}: {value!r}") from None
    if vocab_size is None:
        raise ParseError(f"no vocab_size entry in {side}")
    if vocab_size < 2:
        raise ParseError(f"vocab_size must be >= 2, got {vocab_size}")
    return vocab_size


def iter_corpus(path: str, vocab_size: int | None = None) -> Iterator[np.ndarray]:
    """Stream documents as int64 arrays, validating tokens against the vocab.

    Empty documents (consecutive sentinels) are skipped; a final document not
    closed by a sentinel is accepted.
    """

    if vocab_size is None:
        vocab_size = read_corpus_meta(path)
    pending: list[np.ndarray] = []
    with open(path, "rb") as fp:
        while True:
            buf = fp.read(_CHUNK_TOKENS * 4)
            if not buf:
                break
            if len(buf) % 4 != 0:
                raise ParseError(f"{path}: truncated token record at end of file")
            chunk = np.frombuffer(buf, dtype="<u4").astype(np.int64)
            cuts = np.flatnonzero(chunk == DOC_SENTINEL)
            start = 0
            for cut in cuts:
                pending.append(chunk[start:cut])
                doc = np.concatenate(pending) if len(pending) > 1 else pending[0]
                pending = []
                start = cut + 1
                if doc.size == 0:
                    continue
                if doc.max() >= vocab_size:
                    raise TokenOutOfRange(
                        f"{path}: token {int(doc.max())} outside [0, {vocab_size})")
                yield doc
            if start < chunk.size:
                pending.append(chunk[start:])
    if pending:
        doc = np.concatenate(pending) if len(pending) > 1 else pending[0]
        if doc.size:
            if doc.max() >= vocab_size:
                raise TokenOutOfRange(
                    f"{path}: token {int(doc.max())} outside [0, {vocab_size})")
            yield doc
