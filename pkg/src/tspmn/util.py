"""Shared plumbing: error types, seed derivation, runtime tuning, atomic writes."""

from __future__ import annotations

import contextlib
import ctypes
import hashlib
import json
import os
import tempfile


class TspmnError(Exception):
    """Base for all library errors."""


class DataError(TspmnError):
    """Invalid input data, file contents, or cross-artifact mismatch."""


class NumericalError(TspmnError):
    """Non-finite values or a failed numerical check."""


def subseed(seed: int, *tags: int | str) -> int:
    """Derive a stable 63-bit sub-seed from a root seed and a tag path.

    Every source of randomness in the library draws from one of these, so a
    single root seed reproduces a whole experiment regardless of call order.
    """
    payload = json.dumps([seed, *tags], separators=(",", ":")).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


_ALLOCATOR_TUNED = False


def tune_allocator() -> None:
    """Keep freed multi-megabyte buffers on the heap instead of unmapping.

    The training step allocates and frees the same few-MB activation arrays
    every iteration; with glibc defaults each one is a fresh mmap whose page
    faults cost more than the arithmetic. Raising the mmap/trim thresholds
    roughly halves step time. No-op off glibc.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(1 << 30))  # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(1 << 30))  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def single_thread_blas():
    """Context manager pinning BLAS to one thread.

    The model's matrix products are too small to gain from threads, and a
    fixed thread count keeps floating-point reduction order, and therefore
    checkpoint bytes, independent of the host's CPU count.
    """
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1, user_api="blas")
    except ImportError:
        return contextlib.nullcontext()
