"""Shared error types and seed plumbing."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np


class RlensError(Exception):
    """Base class for toolkit errors."""


class ConfigError(RlensError, ValueError):
    """Invalid configuration or arguments."""


class DataError(RlensError, ValueError):
    """Missing, malformed or inconsistent data on disk or in memory."""


class DegenerateError(RlensError, ArithmeticError):
    """A computation has no meaningful value (e.g. all heatmaps are zero)."""


def substream_seed(seed: int, *keys) -> int:
    """Derive a 64-bit seed from ``seed`` and any number of string/int keys.

    The mapping depends only on the values, never on call order, so work split
    across threads draws the same random numbers as a serial run.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, *keys))


def thread_map(fn, items, threads: int = 1) -> list:
    """Ordered map; runs on a thread pool when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
