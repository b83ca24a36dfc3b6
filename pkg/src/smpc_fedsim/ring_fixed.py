"""Arithmetic in Z_{2^k} and signed fixed-point encoding.

Ring elements are stored as ``numpy.uint64`` arrays.  Every ring width up to
64 bits fits, and numpy's native wrap-around of uint64 arithmetic is already
reduction mod 2^64, so a final mask gives reduction mod 2^k for free.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

RING_DTYPE = np.uint64


class RangeError(ValueError):
    """A real value is too large to embed at the configured precision."""


@dataclass(frozen=True)
class Ring:
    """The ring Z_N with N = 2^k, 1 <= k <= 64."""

    k: int = 64

    def __post_init__(self):
        if not 1 <= self.k <= 64:
            raise ValueError(f"ring width must be in [1, 64], got {self.k}")

    @property
    def modulus(self) -> int:
        return 1 << self.k

    @property
    def mask(self) -> np.uint64:
        return np.uint64(self.modulus - 1)

    @property
    def nbytes(self) -> int:
        """Bytes needed to serialize one element."""
        return (self.k + 7) // 8

    def reduce(self, x) -> np.ndarray:
        return np.asarray(x, dtype=RING_DTYPE) & self.mask

    def element(self, x) -> np.ndarray:
        """Coerce Python ints (possibly negative or >= N) into the ring."""
        if isinstance(x, np.ndarray) and x.dtype == RING_DTYPE:
            return x & self.mask
        arr = np.asarray(x, dtype=object)
        flat = [int(v) % self.modulus for v in arr.ravel()]
        return np.array(flat, dtype=RING_DTYPE).reshape(arr.shape)

    def random(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        raw = rng.integers(0, 2**64, size=shape, dtype=RING_DTYPE)
        return raw & self.mask

    def signed(self, v) -> np.ndarray:
        """Two's-complement view: v if v < N/2 else v - N, as int64 (k <= 64)."""
        v = np.asarray(self.reduce(v))
        # shift the sign bit to bit 63, reinterpret, shift back arithmetically
        up = np.uint64(64 - self.k)
        return (v << up).view(np.int64) >> np.int64(64 - self.k)

    def to_bytes(self, v) -> bytes:
        v = self.reduce(v)
        if self.nbytes == 8:
            return v.astype("<u8").tobytes()
        raw = v.astype("<u8").view(np.uint8).reshape(-1, 8)[:, : self.nbytes]
        return raw.tobytes()

    def from_bytes(self, data: bytes, shape=None) -> np.ndarray:
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, self.nbytes)
        padded = np.zeros((raw.shape[0], 8), dtype=np.uint8)
        padded[:, : self.nbytes] = raw
        out = padded.view("<u8").reshape(-1).astype(RING_DTYPE) & self.mask
        return out if shape is None else out.reshape(shape)


@dataclass(frozen=True)
class FixedPointConfig:
    """Ring width ``k`` and number of fractional bits ``f``.

    k defaults to 64: a product of two encoded values carries 2f fractional
    bits plus the integer bits of both factors, which overflows a 32-bit ring
    as soon as the operands reach magnitude ~1 at f=16.
    """

    k: int = 64
    f: int = 16

    def __post_init__(self):
        if not 2 <= self.f <= self.k - 4:
            raise ValueError(f"need 2 <= f <= k-4, got k={self.k}, f={self.f}")
        Ring(self.k)

    @property
    def ring(self) -> Ring:
        return Ring(self.k)

    @property
    def modulus(self) -> int:
        return 1 << self.k

    @property
    def scale(self) -> int:
        return 1 << self.f

    @property
    def max_magnitude(self) -> float:
        """Exclusive bound on |r| accepted by :func:`encode_fixed`."""
        return float(2 ** (self.k - self.f - 1))


def wrapping(fn):
    """Silence numpy's overflow warning: wrap-around is the point."""

    @functools.wraps(fn)
    def inner(*args, **kwargs):
        with np.errstate(over="ignore"):
            return fn(*args, **kwargs)

    return inner


@wrapping
def ring_add(x, y, cfg) -> np.ndarray:
    ring = _ring_of(cfg)
    return (ring.reduce(x) + ring.reduce(y)) & ring.mask


@wrapping
def ring_sub(x, y, cfg) -> np.ndarray:
    ring = _ring_of(cfg)
    return (ring.reduce(x) - ring.reduce(y)) & ring.mask


@wrapping
def ring_mul(x, y, cfg) -> np.ndarray:
    ring = _ring_of(cfg)
    return (ring.reduce(x) * ring.reduce(y)) & ring.mask


@wrapping
def ring_neg(x, cfg) -> np.ndarray:
    ring = _ring_of(cfg)
    return (np.uint64(0) - ring.reduce(x)) & ring.mask


def signed(v, cfg) -> np.ndarray:
    return _ring_of(cfg).signed(v)


def encode_fixed(r, cfg: FixedPointConfig) -> np.ndarray:
    """Embed reals as round(r * 2^f) mod N, rounding half away from zero."""
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise RangeError("cannot encode non-finite values")
    if r.size and np.max(np.abs(r)) >= cfg.max_magnitude:
        raise RangeError(
            f"|r| = {np.max(np.abs(r)):g} exceeds 2^{cfg.k - cfg.f - 1} "
            f"for k={cfg.k}, f={cfg.f}"
        )
    scaled = r * cfg.scale
    ints = (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int64)
    return ints.astype(RING_DTYPE) & cfg.ring.mask


def decode_fixed(v, cfg: FixedPointConfig) -> np.ndarray:
    return cfg.ring.signed(v).astype(np.float64) / cfg.scale


def _ring_of(cfg) -> Ring:
    if isinstance(cfg, Ring):
        return cfg
    return cfg.ring
