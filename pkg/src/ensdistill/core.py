"""Numeric substrate: dense float64 matrices and a counter-based splittable RNG.

Everything here is deterministic: the same inputs (and the same RNG state)
always produce the same bits on a given machine, which is what lets the rest
of the pipeline promise byte-identical reruns.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when matrix operands have incompatible shapes."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Raises ShapeError naming both shapes when a.cols != b.rows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}")
    return a @ b


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Assert that every entry of `arr` is finite; returns the array."""
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains non-finite entries")
    return arr


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted for overflow safety."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --- counter-based RNG ------------------------------------------------------
#
# A value stream is splitmix64 evaluated at (seed + k * golden), k = counter.
# Stateless per draw, so a stream is just (seed, counter) and advancing it is
# a value operation.  Children are derived by hashing (seed, tag) through the
# same mixer with a domain-separation constant, so child streams never alias
# the parent's value sequence.

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_SPLIT_SALT = np.uint64(0x2545F4914F6CDD1D)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _stream_values(seed: int, start: int, n: int) -> np.ndarray:
    counters = np.arange(start, start + n, dtype=np.uint64)
    base = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return _mix64(base + (counters + np.uint64(1)) * _GOLDEN)


@dataclass(frozen=True)
class RngStream:
    """Seedable, splittable pseudorandom stream with value semantics.

    Drawing returns (values, advanced_stream); the receiver is never mutated,
    so sharing a stream across tasks requires an explicit split per task.
    """

    seed: int
    counter: int = 0

    def uniform(self, n: int) -> tuple[np.ndarray, "RngStream"]:
        """n uniforms in (0, 1]."""
        if n < 0:
            raise ValueError("n must be >= 0")
        raw = _stream_values(self.seed, self.counter, n)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        return u, RngStream(self.seed, self.counter + n)

    def gaussian(self, n: int) -> tuple[np.ndarray, "RngStream"]:
        """n standard-normal variates via Box-Muller."""
        if n < 0:
            raise ValueError("n must be >= 0")
        if n == 0:
            return np.empty(0, dtype=np.float64), self
        m = (n + 1) // 2
        u, nxt = self.uniform(2 * m)
        u1, u2 = u[:m], u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out, nxt

    def permutation(self, n: int) -> tuple[np.ndarray, "RngStream"]:
        """Deterministic permutation of range(n)."""
        u, nxt = self.uniform(n)
        return np.argsort(u, kind="stable"), nxt

    def split(self, tag: int) -> "RngStream":
        """Child stream for `tag`; the parent is unchanged.

        Distinct tags give independent children, and splitting a child again
        with the same tag gives a different stream than the child itself.
        """
        base = np.array([int(self.seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        h = _mix64(base ^ _SPLIT_SALT) + np.uint64(int(tag) & 0xFFFFFFFFFFFFFFFF)
        return RngStream(int(_mix64(h)[0]), 0)
