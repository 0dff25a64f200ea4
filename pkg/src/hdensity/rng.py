"""Splittable seeding and chunked parallel Monte Carlo.

Every random stream is derived from ``SeedSequence([seed, key1, key2, ...])``
where string keys are hashed with CRC-32.  Monte Carlo loops are cut into
fixed-size chunks, each with its own stream indexed by the chunk number, so
the result does not depend on how many worker threads process the chunks.
"""
from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK = 4096
_threads = 1


def set_threads(n: int) -> None:
    global _threads
    _threads = max(1, int(n))


def get_threads() -> int:
    return _threads


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    if isinstance(k, (bool, np.bool_)):
        return int(k)
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFFFFFFFFFF
    if isinstance(k, float):
        return zlib.crc32(repr(k).encode())
    raise TypeError(f"unsupported seed key {k!r}")


def _flatten(keys):
    for k in keys:
        if isinstance(k, tuple):
            yield from _flatten(k)
        else:
            yield k


def stream(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence([_key(seed)] + [_key(k) for k in _flatten(keys)])
    return np.random.Generator(np.random.PCG64(ss))


def chunk_sizes(n: int, chunk: int = CHUNK):
    full, rest = divmod(int(n), chunk)
    sizes = [chunk] * full
    if rest:
        sizes.append(rest)
    return sizes


def parallel_map(fn, items):
    """Map preserving order; threads only change wall-clock time."""
    items = list(items)
    if _threads == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(fn, items))


def mc_chunks(seed: int, key, n: int, fn, chunk: int = CHUNK):
    """Run fn(rng, size) on every chunk; return the list of per-chunk results."""
    sizes = chunk_sizes(n, chunk)

    def run(i):
        return fn(stream(seed, key, i), sizes[i])

    return parallel_map(run, range(len(sizes)))
