"""Trusted dealer: offline Beaver triples and comparison keys.

The dealer never sees online inputs.  Each item it hands out is split into
party-local halves that can be consumed exactly once.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import binio
from .fss import PRG_NAME, DCFKey, dcf_eval, dcf_gen
from .ring_fixed import FixedPointConfig, Ring, wrapping
from .sharing import ShareVector, reconstruct, share

RANDOMNESS_MAGIC = b"SMPCFRND"
RANDOMNESS_VERSION = 1

KIND_MUL = "mul"
KIND_MATMUL = "matmul"
KIND_CMP = "cmp"
_KIND_CODES = {KIND_MUL: 1, KIND_MATMUL: 2, KIND_CMP: 3}


class ReuseError(RuntimeError):
    """A triple or key was used twice; its one-time-pad guarantee is gone."""


class PoolExhausted(RuntimeError):
    pass


class IdentityViolation(ValueError):
    pass


class _Consumable:
    _used: bool

    def consume(self):
        if self._used:
            raise ReuseError(f"{type(self).__name__} {self.id} already consumed")
        self._used = True
        return self

    @property
    def consumed(self) -> bool:
        return self._used


@dataclass(eq=False)
class TripleShare(_Consumable):
    """Party-local half of a Beaver triple."""

    party: int
    kind: str
    a: ShareVector
    b: ShareVector
    c: ShareVector
    id: str
    _used: bool = field(default=False, repr=False)


@dataclass(eq=False)
class BeaverTriple:
    """Both parties' shares of (a, b, c) with c = a*b (or a@b for matmul)."""

    kind: str
    a: tuple
    b: tuple
    c: tuple
    id: str

    def for_party(self, party: int) -> TripleShare:
        return TripleShare(party, self.kind, self.a[party], self.b[party], self.c[party], self.id)

    def check(self):
        ring = self.a[0].ring
        a, b, c = reconstruct(self.a), reconstruct(self.b), reconstruct(self.c)
        want = (a @ b if self.kind == KIND_MATMUL else a * b) & ring.mask
        if not np.array_equal(c, want):
            bad = int(np.count_nonzero(c != want))
            raise IdentityViolation(f"triple {self.id}: c != a*b at {bad} positions")


@dataclass(eq=False)
class ComparisonKey(_Consumable):
    """One party's material for ``shape`` masked comparisons.

    ``fss_key`` shares 1{x <= a} for the mask a.  ``lower_key`` shares
    1{x <= L} with L = a - 2^(k-1) - 1 and ``wrap_share`` shares 1{L > a};
    together they turn the masked test into an exact cyclic interval check
    even when y + a wraps around the ring.
    """

    party: int
    ring: Ring
    shape: tuple
    mask_share: ShareVector
    fss_key: DCFKey
    lower_key: DCFKey
    wrap_share: ShareVector
    id: str
    _used: bool = field(default=False, repr=False)


@wrapping
def gen_beaver(count: int, shape, rng: np.random.Generator, ring: Ring, prefix="t") -> list[BeaverTriple]:
    out = []
    for i in range(count):
        a, b = ring.random(rng, shape), ring.random(rng, shape)
        out.append(_triple(KIND_MUL, a, b, (a * b) & ring.mask, rng, ring, f"{prefix}{i}"))
    return out


def gen_matmul_triple(shape_a, shape_b, rng: np.random.Generator, ring: Ring, id="m0") -> BeaverTriple:
    a, b = ring.random(rng, shape_a), ring.random(rng, shape_b)
    return _triple(KIND_MATMUL, a, b, (a @ b) & ring.mask, rng, ring, id)


def _triple(kind, a, b, c, rng, ring, id) -> BeaverTriple:
    return BeaverTriple(
        kind,
        tuple(share(a, 2, rng, ring)),
        tuple(share(b, 2, rng, ring)),
        tuple(share(c, 2, rng, ring)),
        id,
    )


@wrapping
def gen_comparison_key(rng: np.random.Generator, cfg, shape=(), id="c0", mask=None):
    """Return (key for party 0, key for party 1) over a uniform mask a.

    ``mask`` pins a instead of drawing it; only tests should need that.
    """
    ring = cfg if isinstance(cfg, Ring) else cfg.ring
    offset = np.uint64((1 << (ring.k - 1)) + 1)
    if mask is None:
        mask = ring.random(rng, tuple(shape))
    else:
        mask = ring.reduce(mask)
    shape = mask.shape
    lower = (mask - offset) & ring.mask
    wrap = (lower > mask).astype(np.uint64)
    f0, f1 = dcf_gen(mask, rng, ring)
    l0, l1 = dcf_gen(lower, rng, ring)
    m0, m1 = share(mask, 2, rng, ring)
    w0, w1 = share(wrap, 2, rng, ring)
    return (
        ComparisonKey(0, ring, shape, m0, f0, l0, w0, id),
        ComparisonKey(1, ring, shape, m1, f1, l1, w1, id),
    )


def fss_eval(party: int, key: ComparisonKey, x) -> np.ndarray:
    """Party's additive share of 1{x <= a} at the public point x."""
    if party not in (0, 1):
        raise ValueError(f"party must be 0 or 1, got {party}")
    x = key.ring.reduce(x)
    return dcf_eval(party, key.fss_key, x).reshape(x.shape)


# -- batched, per-sample material --------------------------------------------

def plan_counts(plan: Sequence[tuple]) -> dict:
    """Scalar operations per kind for a plan (the dry-run cost query).

    A mul or cmp request counts its elements; a matmul request counts its
    scalar products, rows(a) x inner x cols(b).
    """
    counts = {KIND_MUL: 0, KIND_MATMUL: 0, KIND_CMP: 0}
    for req in plan:
        n = int(np.prod(req[1]))
        counts[req[0]] += n * req[2][-1] if req[0] == KIND_MATMUL else n
    return counts


class Dealer:
    """Generates correlated randomness for a plan of requests.

    Material for each sample is derived from ``(seed, sample_id)`` alone, so
    a sample receives the same randomness whichever batch it is in.  Sample
    ids must therefore identify inputs uniquely within one dealer seed.
    """

    def __init__(self, cfg: FixedPointConfig, seed: int):
        self.cfg = cfg
        self.ring = cfg.ring
        self.seed = seed

    def material(self, plan: Sequence[tuple], sample_ids: Sequence[int]) -> list:
        per_sample = [self._for_sample(plan, sid) for sid in sample_ids]
        return [_stack(items) for items in zip(*per_sample)]

    def _for_sample(self, plan, sid):
        rng = np.random.default_rng([self.seed, sid])
        items = []
        for idx, req in enumerate(plan):
            kind, id = req[0], f"q{idx}"
            if kind == KIND_MUL:
                items.append(gen_beaver(1, req[1], rng, self.ring, prefix=id)[0])
                items[-1].id = id
            elif kind == KIND_MATMUL:
                items.append(gen_matmul_triple(req[1], req[2], rng, self.ring, id))
            elif kind == KIND_CMP:
                items.append(gen_comparison_key(rng, self.ring, req[1], id))
            else:
                raise ValueError(f"unknown request kind {kind!r}")
        return items


def _stack(items: list):
    """Stack per-sample items along a new leading batch axis."""
    first = items[0]
    if isinstance(first, BeaverTriple):
        ring = first.a[0].ring

        def st(attr, p):
            return ShareVector(p, np.stack([getattr(t, attr)[p].values for t in items]), ring)

        return BeaverTriple(
            first.kind,
            (st("a", 0), st("a", 1)),
            (st("b", 0), st("b", 1)),
            (st("c", 0), st("c", 1)),
            first.id,
        )
    keys = []
    for p in (0, 1):
        ks = [pair[p] for pair in items]
        k0 = ks[0]
        keys.append(
            ComparisonKey(
                p,
                k0.ring,
                (len(ks),) + k0.shape,
                ShareVector(p, np.stack([k.mask_share.values for k in ks]), k0.ring),
                DCFKey.concat([k.fss_key for k in ks]),
                DCFKey.concat([k.lower_key for k in ks]),
                ShareVector(p, np.stack([k.wrap_share.values for k in ks]), k0.ring),
                k0.id,
            )
        )
    return tuple(keys)


class PartyPool:
    """One party's queue of correlated randomness, consumed in plan order."""

    def __init__(self, party: int, items: Sequence):
        self.party = party
        self._items = deque(_party_half(it, party) for it in items)
        self.total = len(self._items)

    def __len__(self):
        return len(self._items)

    def take(self, kind: str, shape_hint=None):
        if not self._items:
            raise PoolExhausted(
                f"party {self.party}: pool of {self.total} items exhausted"
            )
        item = self._items.popleft()
        got = item.kind if isinstance(item, TripleShare) else KIND_CMP
        if got != kind:
            raise PoolExhausted(f"party {self.party}: expected {kind} material, next item is {got}")
        if shape_hint is not None:
            have = item.a.shape if isinstance(item, TripleShare) else item.shape
            if tuple(have) != tuple(shape_hint):
                raise PoolExhausted(
                    f"party {self.party}: {kind} item {item.id} has shape {have}, need {shape_hint}"
                )
        return item


def _party_half(item, party):
    if isinstance(item, BeaverTriple):
        return item.for_party(party)
    return item[party]


def require_pool(plan: Sequence[tuple], items: Sequence):
    """Raise a setup error naming the required counts when ``items`` is short."""
    if len(items) < len(plan):
        need = plan_counts(plan)
        raise PoolExhausted(
            f"need {len(plan)} correlated-randomness items "
            f"({need[KIND_MUL]} mul, {need[KIND_MATMUL]} matmul, {need[KIND_CMP]} cmp scalar ops), "
            f"have {len(items)}"
        )


# -- persistence ---------------------------------------------------------------

def save_randomness(path, cfg: FixedPointConfig, items: Sequence):
    """Write dealer output as SMPCFRND: magic, version u16, k u8, f u8, count u32, records."""
    with open(path, "wb") as fh:
        binio.write_magic(fh, RANDOMNESS_MAGIC, RANDOMNESS_VERSION)
        binio.write_u8(fh, cfg.k)
        binio.write_u8(fh, cfg.f)
        binio.write_str(fh, PRG_NAME)
        binio.write_u32(fh, len(items))
        for item in items:
            if isinstance(item, BeaverTriple):
                arrays = [item.a[0], item.a[1], item.b[0], item.b[1], item.c[0], item.c[1]]
                arrays = [s.values for s in arrays]
                kind = item.kind
                id = item.id
            else:
                k0, k1 = item
                kind, id = KIND_CMP, k0.id
                arrays = [
                    k0.mask_share.values, k1.mask_share.values,
                    k0.wrap_share.values, k1.wrap_share.values,
                    k0.fss_key.seed, k1.fss_key.seed, *k0.fss_key.arrays()[1:],
                    k0.lower_key.seed, k1.lower_key.seed, *k0.lower_key.arrays()[1:],
                ]
            binio.write_u8(fh, _KIND_CODES[kind])
            binio.write_str(fh, id)
            binio.write_u8(fh, len(arrays))
            for arr in arrays:
                binio.write_array(fh, arr)


def load_randomness(path):
    """Inverse of :func:`save_randomness`; returns (cfg, items)."""
    kinds = {v: k for k, v in _KIND_CODES.items()}
    with open(path, "rb") as fh:
        binio.read_magic(fh, RANDOMNESS_MAGIC, RANDOMNESS_VERSION)
        cfg = FixedPointConfig(binio.read_u8(fh), binio.read_u8(fh))
        prg_name = binio.read_str(fh)
        if prg_name != PRG_NAME:
            raise binio.FormatError(f"file uses PRG {prg_name!r}, this build has {PRG_NAME!r}")
        ring = cfg.ring
        items = []
        for _ in range(binio.read_u32(fh)):
            code = binio.read_u8(fh)
            if code not in kinds:
                raise binio.FormatError(f"unknown record kind {code}")
            kind = kinds[code]
            id = binio.read_str(fh)
            arrays = [binio.read_array(fh) for _ in range(binio.read_u8(fh))]
            if kind == KIND_CMP:
                m0, m1, w0, w1 = arrays[:4]
                fs0, fs1, *fcw = arrays[4:11]
                ls0, ls1, *lcw = arrays[11:18]
                shape = m0.shape
                items.append(tuple(
                    ComparisonKey(
                        p, ring, shape,
                        ShareVector(p, (m0, m1)[p], ring),
                        DCFKey(p, ring, ring.k, (fs0, fs1)[p], *fcw),
                        DCFKey(p, ring, ring.k, (ls0, ls1)[p], *lcw),
                        ShareVector(p, (w0, w1)[p], ring),
                        id,
                    )
                    for p in (0, 1)
                ))
            else:
                sv = [ShareVector(i % 2, a, ring) for i, a in enumerate(arrays)]
                items.append(BeaverTriple(kind, (sv[0], sv[1]), (sv[2], sv[3]), (sv[4], sv[5]), id))
    return cfg, items
