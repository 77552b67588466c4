"""Counter-based uniform RNG for order-independent, per-pixel sampling.

A splitmix64-style hash of (seed, px, py, counter) gives every pixel its own
reproducible stream, so frames render identically for any worker count or
pixel ordering.
"""
from __future__ import annotations

import numpy as np

_G1 = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x):
    x = (x + _G1).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= _M1
    x ^= x >> np.uint64(27)
    x *= _M2
    x ^= x >> np.uint64(31)
    return x


def hash_uniform(seed, px, py, k):
    """Uniform draws in [0, 1) keyed by (seed, px, py, k); all vectorized."""
    s = np.uint64(np.int64(seed))
    h = _mix(np.asarray(px, dtype=np.uint64) ^ _mix(np.broadcast_to(s, np.shape(px)).astype(np.uint64)))
    h = _mix(np.asarray(py, dtype=np.uint64) ^ h)
    h = _mix(np.asarray(k, dtype=np.uint64) ^ h)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def pixel_uniforms(seed, px, py, n, offset=0):
    """[B, n] uniforms for pixel arrays px, py; draw k runs offset..offset+n."""
    px = np.asarray(px, dtype=np.uint64)[:, None]
    py = np.asarray(py, dtype=np.uint64)[:, None]
    k = np.arange(offset, offset + n, dtype=np.uint64)[None, :]
    return hash_uniform(seed, np.broadcast_to(px, (px.shape[0], n)),
                        np.broadcast_to(py, (py.shape[0], n)), np.broadcast_to(k, (px.shape[0], n)))
