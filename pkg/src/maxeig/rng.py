"""Deterministic, splittable random streams.

Every stochastic quantity in the library (prior draws, outcome noise,
Gumbel noise, baseline designs, resampling) is drawn from an RngStream.
Streams are counter-based: draw ``i`` of stream ``s`` is a pure function
of ``(s.key, i)``, so a run is bit-reproducible regardless of how work is
split across processes.  Substreams are derived by hashing a string
label, never by sharing counter state.
"""

from __future__ import annotations

import math

import numpy as np

_U64 = np.uint64
_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Extreme uniforms are clamped before log transforms (Gumbel inverse CDF).
_UEPS = 1e-12


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; bijective on uint64."""
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def _mix64_scalar(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _fnv1a64(label: str) -> int:
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


class RngStream:
    """A labelled, counter-based stream of pseudo-random draws.

    The stream owns a monotone counter; each draw consumes counter slots
    and maps them through SplitMix64.  ``split`` derives an independent
    child stream from ``(parent key, label)`` only, so the order in which
    a parent draws has no effect on its children.
    """

    __slots__ = ("key", "label", "counter")

    def __init__(self, seed: int, label: str = "root"):
        key = _mix64_scalar((seed & _MASK) + _GOLDEN)
        self.key = _mix64_scalar(key ^ _fnv1a64(label))
        self.label = label
        self.counter = 0

    @classmethod
    def _from_key(cls, key: int, label: str) -> "RngStream":
        s = cls.__new__(cls)
        s.key = key & _MASK
        s.label = label
        s.counter = 0
        return s

    def split(self, label: str) -> "RngStream":
        """Child stream deterministic in (self.key, label)."""
        return RngStream._from_key(_mix64_scalar(self.key ^ _fnv1a64(label)), label)

    # -- raw draws ------------------------------------------------------

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64((_U64(self.key) + idx * _U64(_GOLDEN)) & _U64(_MASK))

    def uniform01(self, shape=()) -> np.ndarray:
        """Uniforms in [0, 1) with 53-bit resolution."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else np.float64(u[0])

    # -- distributions ---------------------------------------------------

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        if not high > low:
            raise ValueError(f"uniform requires high > low, got [{low}, {high}]")
        return low + (high - low) * self.uniform01(shape)

    def standard_normal(self, shape=()) -> np.ndarray:
        """Box-Muller pairs; the spare half of an odd request is discarded."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - np.atleast_1d(self.uniform01((m,)))  # (0, 1]
        u2 = np.atleast_1d(self.uniform01((m,)))
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else np.float64(z[0])

    def normal(self, mu, sigma, shape=()):
        """mu + sigma * eps with a fresh standard-normal eps.

        mu and sigma may be autodiff nodes; the draw is reparameterized so
        gradients flow through the returned value into mu and sigma.
        """
        sig_val = np.asarray(getattr(sigma, "data", sigma), dtype=np.float64)
        if np.any(sig_val <= 0):
            raise ValueError(f"normal requires sigma > 0, got {sig_val}")
        return mu + sigma * self.standard_normal(shape)

    def gumbel01(self, shape=()) -> np.ndarray:
        u = np.clip(self.uniform01(shape), _UEPS, 1.0 - _UEPS)
        return -np.log(-np.log(u))

    def integers(self, n_values: int, shape=()) -> np.ndarray:
        """Uniform integers in [0, n_values)."""
        if n_values < 1:
            raise ValueError("n_values must be >= 1")
        return np.floor(self.uniform01(shape) * n_values).astype(np.int64)

    def __repr__(self) -> str:
        return f"RngStream(key={self.key:#018x}, label={self.label!r}, counter={self.counter})"


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
