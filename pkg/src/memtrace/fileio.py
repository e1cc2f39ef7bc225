"""Atomic output files, CSV emission, and order-preserving parallel mapping."""

from __future__ import annotations

import contextlib
import csv
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Iterator, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


@contextlib.contextmanager
def atomic_writer(path: str, text: bool = False):
    """Write to a temp file in the target directory, rename on success.

    A failure inside the block unlinks the temp file, so partial outputs never
    land at the destination path.
    """

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        mode = "w" if text else "wb"
        with os.fdopen(fd, mode, encoding="utf-8" if text else None, newline="" if text else None) as fp:
            yield fp
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def write_bytes(path: str, data: bytes) -> None:
    with atomic_writer(path) as fp:
        fp.write(data)


def fmt(value: Any) -> str:
    """Fixed CSV cell formatting: floats at 6 decimal places, None empty."""

    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """Atomically write rows with the shared cell formatting; returns row count."""

    n = 0
    with atomic_writer(path, text=True) as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(cell) for cell in row])
            n += 1
    return n


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> Iterator[R]:
    """Map preserving input order; results are identical for any thread count."""

    if threads <= 1:
        return map(fn, items)
    executor = ThreadPoolExecutor(max_workers=threads)

    def run() -> Iterator[R]:
        try:
            yield from executor.map(fn, items)
        finally:
            executor.shutdown(wait=True)

    return run()
