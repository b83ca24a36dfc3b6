"""Online two-party protocols over additive shares.

Every protocol here is a generator run inside one computing party's program
(``party`` is 0 or 1); call it with ``yield from``.  The only values ever
opened are masked by dealer material, and each open is tagged in the
transcript with the id of the mask that hid it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dealer import KIND_MATMUL, ComparisonKey, ReuseError, TripleShare
from .fss import PRG_CALLS_PER_LEVEL, dcf_eval
from .ring_fixed import RING_DTYPE
from .sharing import ShareVector, add_public, add_shares, neg_share, sub_shares
from .simnet import Network, PartyContext

# Abstract compute cost model, in "ops" charged to the party clock.
AES_BLOCK_OPS = 16

TAG_BEAVER = "open:beaver"
TAG_CMP = "open:cmp"
TAG_OUTPUT = "open:output"
MASKED_TAGS = frozenset({TAG_BEAVER, TAG_CMP})


@dataclass(frozen=True)
class OpenedValue:
    value: np.ndarray
    round: int


def _other(ctx: PartyContext) -> int:
    if ctx.party not in (0, 1):
        raise ValueError(f"computing parties are 0 and 1, not {ctx.party!r}")
    return 1 - ctx.party


def open_many(ctx: PartyContext, shares: list[ShareVector], tag: str, mask_id: str | None = None):
    """Open several share vectors in a single message each way."""
    other = _other(ctx)
    ring = shares[0].ring
    payload = b"".join(ring.to_bytes(s.values) for s in shares)
    ctx.send(other, payload, tag=tag, mask_id=mask_id)
    msg = yield ctx.recv(other)
    if msg.length != len(payload):
        raise ValueError(f"open: expected {len(payload)} bytes, got {msg.length}")
    out, pos = [], 0
    for s in shares:
        n = s.length * ring.nbytes
        theirs = ring.from_bytes(msg.payload[pos:pos + n], s.shape)
        out.append((s.values + theirs) & ring.mask)
        pos += n
    ctx.compute(sum(s.length for s in shares))
    return out


def open_value(ctx: PartyContext, x: ShareVector, tag: str = TAG_OUTPUT, mask_id: str | None = None):
    """Reveal x to both parties; costs one ring element per scalar each way."""
    (value,) = yield from open_many(ctx, [x], tag, mask_id)
    return OpenedValue(value, ctx.round)


def beaver_mul(ctx: PartyContext, x: ShareVector, y: ShareVector, t: TripleShare):
    """Elementwise product of two shared arrays (no rescaling)."""
    if t.party != ctx.party:
        raise ValueError(f"party {ctx.party} given triple half of party {t.party}")
    if x.shape != y.shape or t.a.shape != x.shape:
        raise ValueError(f"shape mismatch: x {x.shape}, y {y.shape}, triple {t.a.shape}")
    t.consume()
    e_sh, d_sh = sub_shares(x, t.a), sub_shares(y, t.b)
    e, d = yield from open_many(ctx, [e_sh, d_sh], TAG_BEAVER, t.id)
    z = t.c.values + e * t.b.values + d * t.a.values
    if ctx.party == 0:
        z = z + e * d
    ctx.compute(4 * x.length)
    return ShareVector(ctx.party, z, x.ring)


def beaver_matmul(ctx: PartyContext, x: ShareVector, w: ShareVector, t: TripleShare):
    """Batched product x @ w for x of shape (B, P, n) and w broadcastable to (B, n, m)."""
    if t.kind != KIND_MATMUL:
        raise ValueError("beaver_matmul needs a matmul triple")
    if t.a.shape != x.shape:
        raise ValueError(f"triple a has shape {t.a.shape}, x has {x.shape}")
    wv = np.broadcast_to(w.values, t.b.shape)
    t.consume()
    e_sh = sub_shares(x, t.a)
    d_sh = ShareVector(ctx.party, wv - t.b.values, x.ring)
    e, d = yield from open_many(ctx, [e_sh, d_sh], TAG_BEAVER, t.id)
    z = t.c.values + e @ t.b.values + t.a.values @ d
    if ctx.party == 0:
        z = z + e @ d
    B, P, n = x.shape
    m = t.b.shape[-1]
    ctx.compute(3 * B * P * n * m)
    return ShareVector(ctx.party, z, x.ring)


def truncate(x: ShareVector, shift: int) -> ShareVector:
    """Local probabilistic division by 2^shift.

    Party 0 shifts its share; party 1 shifts the negation of its share and
    negates back.  For |x| < 2^l the result is floor(x / 2^shift) or one more,
    except with probability at most 2^(l + 1 - k) per element.
    """
    ring = x.ring
    s = np.uint64(shift)
    if x.party == 0:
        out = x.values >> s
    else:
        neg = (np.uint64(0) - x.values) & ring.mask
        out = np.uint64(0) - (neg >> s)
    return ShareVector(x.party, out, ring)


def compare_leq_zero(ctx: PartyContext, y: ShareVector, key: ComparisonKey):
    """Shares of the bit 1{signed(y) <= 0}, exact for every y in the ring.

    Opens x = y + a once.  With a the dealer's mask and L = a - 2^(k-1) - 1,
    y lies in [-2^(k-1), 0] exactly when x falls in the cyclic interval
    (L, a], i.e. 1{x <= a} - 1{x <= L} + 1{L > a}.  The bare test
    1{x <= a} is wrong whenever y + a wraps, which happens for about half
    of all masks.
    """
    if key.party != ctx.party:
        raise ValueError(f"party {ctx.party} given key half of party {key.party}")
    if tuple(key.shape) != y.shape:
        raise ValueError(f"key shape {key.shape} != input shape {y.shape}")
    key.consume()
    x_sh = add_shares(y, key.mask_share)
    (x,) = yield from open_many(ctx, [x_sh], TAG_CMP, key.id)
    upper = dcf_eval(ctx.party, key.fss_key, x)
    lower = dcf_eval(ctx.party, key.lower_key, x)
    bit = (upper - lower).reshape(y.shape) + key.wrap_share.values
    ctx.compute(2 * key.ring.k * PRG_CALLS_PER_LEVEL * AES_BLOCK_OPS * y.length)
    return ShareVector(ctx.party, bit, y.ring)


def one_minus(bit: ShareVector) -> ShareVector:
    return add_public(neg_share(bit), np.uint64(1))


def secure_relu(ctx: PartyContext, y: ShareVector, key: ComparisonKey, triple: TripleShare):
    """max(0, y) via y * (1 - 1{y <= 0}); exact, no truncation needed."""
    leq = yield from compare_leq_zero(ctx, y, key)
    return (yield from beaver_mul(ctx, y, one_minus(leq), triple))


def secure_max(ctx: PartyContext, u: ShareVector, v: ShareVector, key: ComparisonKey, triple: TripleShare):
    """max(u, v) = v + (u - v) * 1{u - v > 0}."""
    diff = sub_shares(u, v)
    leq = yield from compare_leq_zero(ctx, diff, key)
    sel = yield from beaver_mul(ctx, diff, one_minus(leq), triple)
    return add_shares(v, sel)


def run_pair(program, args0: tuple, args1: tuple, net: Network | None = None, seed: int = 0, session: str = "s0"):
    """Run ``program(ctx, *args_p)`` at both computing parties; return (out0, out1)."""
    net = net or Network()
    outs = net.run(
        {0: lambda ctx: program(ctx, *args0), 1: lambda ctx: program(ctx, *args1)},
        seed=seed,
        session=session,
    )
    return outs[0], outs[1]


__all__ = [
    "OpenedValue", "open_value", "open_many", "beaver_mul", "beaver_matmul", "truncate",
    "compare_leq_zero", "secure_relu", "secure_max", "one_minus", "run_pair",
    "ReuseError", "RING_DTYPE", "TAG_BEAVER", "TAG_CMP", "TAG_OUTPUT", "MASKED_TAGS",
]
