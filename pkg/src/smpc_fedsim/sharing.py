"""n-party additive secret sharing over Z_{2^k}."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ring_fixed import RING_DTYPE, Ring, wrapping


class ParameterError(ValueError):
    pass


class ReconstructionError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """Raised when an operation would co-locate shares of different parties."""


@dataclass(frozen=True, eq=False)
class ShareVector:
    """One party's additive share of a secret array.

    ``values`` may have any shape; ``length`` is its element count.
    """

    party: int
    values: np.ndarray
    ring: Ring

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=RING_DTYPE) & self.ring.mask
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def length(self) -> int:
        return int(self.values.size)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def reshape(self, *shape) -> "ShareVector":
        return ShareVector(self.party, self.values.reshape(*shape), self.ring)

    def __getitem__(self, idx) -> "ShareVector":
        return ShareVector(self.party, self.values[idx], self.ring)

    def __repr__(self):
        return f"ShareVector(party={self.party}, shape={self.shape}, k={self.ring.k})"


@wrapping
def share(secret, n: int, rng: np.random.Generator, ring: Ring) -> list[ShareVector]:
    """Split ``secret`` into ``n`` shares; the first n-1 are uniform."""
    if n < 2:
        raise ParameterError(f"need at least 2 parties, got {n}")
    secret = np.asarray(ring.reduce(secret))
    shape = secret.shape
    secret = secret.reshape(-1)
    shares = [ring.random(rng, secret.shape) for _ in range(n - 1)]
    last = secret.copy()
    for s in shares:
        last = (last - s) & ring.mask
    shares.append(last)
    return [ShareVector(i, s.reshape(shape), ring) for i, s in enumerate(shares)]


@wrapping
def reconstruct(shares: Sequence[ShareVector], n: int | None = None) -> np.ndarray:
    """Elementwise sum mod N of every party's share.

    ``n`` is the expected party count; when omitted, the parties must be
    exactly 0..len(shares)-1 and at least two must be present.
    """
    if not shares:
        raise ReconstructionError("no shares given")
    parties = sorted(s.party for s in shares)
    expected = list(range(n if n is not None else len(shares)))
    if parties != expected or len(parties) < 2:
        raise ReconstructionError(f"need shares from parties {expected}, got {parties}")
    ring, shape = shares[0].ring, shares[0].shape
    total = np.zeros(shape, dtype=RING_DTYPE)
    for s in shares:
        if s.ring != ring or s.shape != shape:
            raise ReconstructionError("shares disagree on ring or shape")
        total = total + s.values
    return total & ring.mask


def _check_pair(a: ShareVector, b: ShareVector):
    if a.party != b.party:
        raise ProtocolError(f"cannot combine shares of party {a.party} and party {b.party}")
    if a.ring != b.ring:
        raise ProtocolError("shares live in different rings")
    if a.shape != b.shape:
        raise ProtocolError(f"shape mismatch {a.shape} vs {b.shape}")


@wrapping
def add_shares(a: ShareVector, b: ShareVector) -> ShareVector:
    _check_pair(a, b)
    return ShareVector(a.party, a.values + b.values, a.ring)


@wrapping
def sub_shares(a: ShareVector, b: ShareVector) -> ShareVector:
    _check_pair(a, b)
    return ShareVector(a.party, a.values - b.values, a.ring)


@wrapping
def neg_share(a: ShareVector) -> ShareVector:
    return ShareVector(a.party, np.uint64(0) - a.values, a.ring)


@wrapping
def add_public(a: ShareVector, c) -> ShareVector:
    """Add a public constant; party 0 absorbs it, everyone else passes through."""
    c = a.ring.element(c) if not isinstance(c, np.ndarray) else a.ring.reduce(c)
    if c.shape not in ((), a.shape):
        raise ParameterError(f"public vector shape {c.shape} != share shape {a.shape}")
    if a.party != 0:
        return a
    return ShareVector(a.party, a.values + c, a.ring)


@wrapping
def mul_public(a: ShareVector, c) -> ShareVector:
    c = a.ring.element(c) if not isinstance(c, np.ndarray) else a.ring.reduce(c)
    return ShareVector(a.party, a.values * c, a.ring)


def zeros_share(party: int, shape, ring: Ring) -> ShareVector:
    return ShareVector(party, np.zeros(shape, dtype=RING_DTYPE), ring)
