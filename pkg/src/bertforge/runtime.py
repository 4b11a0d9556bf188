"""Process-level plumbing: thread pinning, hashing, and seed derivation.

All randomness in the toolkit flows from a single integer seed. Child
streams are derived with ``numpy.random.SeedSequence`` keyed on small
integer tuples, so any component can be re-run in isolation and still
reproduce the stream it saw inside a larger run.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

THREADS_ENV_VAR = "FORGE_THREADS"

_thread_limiter = None


def pinned_thread_count() -> int | None:
    """Thread count requested via the environment, or None if unset."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError(f"{THREADS_ENV_VAR} must be >= 1, got {n}")
    return n


def pin_threads(limit: int | None = None) -> int | None:
    """Pin BLAS/OpenMP thread pools for deterministic timing and math.

    The explicit ``limit`` wins over the ``FORGE_THREADS`` environment
    variable. Returns the applied limit, or None when nothing was pinned.
    The limiter is kept alive for the rest of the process.
    """
    global _thread_limiter
    if limit is None:
        limit = pinned_thread_count()
    if limit is None:
        return None
    from threadpoolctl import threadpool_limits

    if _thread_limiter is not None:
        _thread_limiter.restore_original_limits()
    _thread_limiter = threadpool_limits(limits=limit)
    return limit


def file_sha256(path: str) -> str:
    """Hex SHA-256 of a file's contents."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def bytes_sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def make_rng(seed: int, *key: int | str) -> np.random.Generator:
    """Deterministic generator for stream (seed, *key).

    Distinct keys give statistically independent streams; the same
    (seed, key) always yields the identical stream on every platform.
    String key parts are hashed to integers so call sites can name their
    stream ("nsp-pack", "init") instead of inventing magic numbers.
    """
    entropy = [seed]
    for part in key:
        if isinstance(part, str):
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:8], "little"))
        else:
            entropy.append(part)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
