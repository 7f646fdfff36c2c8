"""FNV-1a hashing and the compiled kernels behind featurization and n-gram scans.

Tokenized texts are canonicalized as single-space-joined UTF-8 bytes before
hashing. In that form the space byte 0x20 only ever occurs as a token
separator (it cannot appear inside a multi-byte UTF-8 sequence), so the
kernels recover token boundaries from the raw bytes, and every space-joined
n-gram is a contiguous byte slice of the canonical buffer.
"""

from __future__ import annotations

import numpy as np
from numba import njit

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

# Odd multiplier for combining per-token hashes into window keys.
WINDOW_MULT = FNV_PRIME


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a of a byte string (reference implementation)."""
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def canonical_bytes(tokens: list[str]) -> np.ndarray:
    """Single-space-joined tokens as a uint8 array ready for the kernels."""
    return np.frombuffer(" ".join(tokens).encode("utf-8"), dtype=np.uint8)


@njit(cache=True)
def _token_bounds(data):
    n = data.size
    if n == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    count = 1
    for i in range(n):
        if data[i] == 0x20:
            count += 1
    starts = np.empty(count, np.int64)
    ends = np.empty(count, np.int64)
    t = 0
    starts[0] = 0
    for i in range(n):
        if data[i] == 0x20:
            ends[t] = i
            t += 1
            starts[t] = i + 1
    ends[t] = n
    return starts, ends


@njit(cache=True)
def _fnv_range(data, lo, hi):
    h = np.uint64(0xCBF29CE484222325)
    p = np.uint64(0x100000001B3)
    for i in range(lo, hi):
        h = (h ^ np.uint64(data[i])) * p
    return h


@njit(cache=True)
def _ngram_bucket_ids_kernel(data, max_ngram, buckets):
    starts, ends = _token_bounds(data)
    t = starts.size
    total = 0
    for k in range(2, max_ngram + 1):
        if t >= k:
            total += t - k + 1
    out = np.empty(total, np.int64)
    w = 0
    b = np.uint64(buckets)
    for k in range(2, max_ngram + 1):
        for i in range(t - k + 1):
            h = _fnv_range(data, starts[i], ends[i + k - 1])
            out[w] = np.int64(h % b)
            w += 1
    return out


@njit(cache=True)
def _token_fnv_kernel(data):
    starts, ends = _token_bounds(data)
    out = np.empty(starts.size, np.uint64)
    for i in range(starts.size):
        out[i] = _fnv_range(data, starts[i], ends[i])
    return out


def ngram_bucket_ids(tokens: list[str], max_ngram: int, buckets: int) -> np.ndarray:
    """Bucket ids of all space-joined word n-grams for n in 2..max_ngram.

    Order: n ascending, then position left to right. Ids are FNV-1a-64 of the
    joined n-gram modulo `buckets`, without any row offset applied.
    """
    if max_ngram < 2 or len(tokens) < 2:
        return np.empty(0, np.int64)
    return _ngram_bucket_ids_kernel(canonical_bytes(tokens), max_ngram, buckets)


def token_fnv64(tokens: list[str]) -> np.ndarray:
    """Per-token FNV-1a-64 hashes as a uint64 array."""
    if not tokens:
        return np.empty(0, np.uint64)
    return _token_fnv_kernel(canonical_bytes(tokens))


def window_keys(token_hashes: np.ndarray, n: int) -> np.ndarray:
    """Polynomial keys of every length-n window of a token-hash sequence.

    key(i) = sum_j hashes[i+j] * WINDOW_MULT**(n-1-j) mod 2**64, vectorized
    over all windows. Must stay bit-identical to `window_key_py`.
    """
    t = token_hashes.size
    if t < n:
        return np.empty(0, np.uint64)
    mult = np.uint64(WINDOW_MULT)
    keys = np.zeros(t - n + 1, np.uint64)
    for j in range(n):
        keys = keys * mult + token_hashes[j : j + t - n + 1]
    return keys


def window_key_py(tokens: list[str]) -> int:
    """Window key of a full token list (pure-Python twin of `window_keys`)."""
    k = 0
    for tok in tokens:
        k = (k * WINDOW_MULT + fnv1a_64(tok.encode("utf-8"))) & _MASK64
    return k


def ngram_bucket_ids_py(tokens: list[str], max_ngram: int, buckets: int) -> list[int]:
    """Brute-force twin of `ngram_bucket_ids`, kept independent for tests."""
    out = []
    for n in range(2, max_ngram + 1):
        for i in range(len(tokens) - n + 1):
            joined = " ".join(tokens[i : i + n])
            out.append(fnv1a_64(joined.encode("utf-8")) % buckets)
    return out
