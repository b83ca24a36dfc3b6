"""Distributed comparison function (DCF) for the predicate 1{x <= alpha}.

Two-party FSS via a GGM-style PRG tree over the bits of x, most significant
bit first, with one correction word per level.  Both gen and eval are
vectorized over a batch of independent keys.

The PRG is fixed-key AES-128 in Matyas-Meyer-Oseas mode,
``G_i(s) = AES_{K_i}(s) xor s`` for three public keys ``K_i``; one call on a
128-bit seed yields the left/right child seeds, their control bits and two
64-bit output words.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .ring_fixed import RING_DTYPE, Ring

PRG_NAME = "aes128-mmo-3key/v1"

_PRG_KEYS = [hashlib.sha256(f"{PRG_NAME}:{i}".encode()).digest()[:16] for i in range(3)]
_ONE = np.uint64(1)


def _aes_mmo(key: bytes, seeds: np.ndarray) -> np.ndarray:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    raw = np.ascontiguousarray(seeds, dtype="<u8")
    out = np.frombuffer(enc.update(raw.tobytes()) + enc.finalize(), dtype="<u8")
    return out.reshape(seeds.shape).astype(RING_DTYPE) ^ seeds


def prg(seeds: np.ndarray):
    """Expand (m, 2) uint64 seeds into (sL, tL, sR, tR, vL, vR)."""
    left = _aes_mmo(_PRG_KEYS[0], seeds)
    right = _aes_mmo(_PRG_KEYS[1], seeds)
    words = _aes_mmo(_PRG_KEYS[2], seeds)
    t_left = (left[:, 0] & _ONE).astype(np.uint8)
    t_right = (right[:, 0] & _ONE).astype(np.uint8)
    left[:, 0] &= ~_ONE
    right[:, 0] &= ~_ONE
    return left, t_left, right, t_right, words[:, 0], words[:, 1]


PRG_CALLS_PER_LEVEL = 3  # AES blocks per seed per tree level


@dataclass
class DCFKey:
    """One party's half of a batch of DCF keys.

    All arrays have a leading dimension of ``m`` keys; the correction words
    are common to both halves, only ``seed`` and ``party`` differ.
    """

    party: int
    ring: Ring
    nbits: int
    seed: np.ndarray  # (m, 2)
    s_cw: np.ndarray  # (m, nbits, 2)
    v_cw: np.ndarray  # (m, nbits)
    tl_cw: np.ndarray  # (m, nbits) uint8
    tr_cw: np.ndarray  # (m, nbits) uint8
    final_cw: np.ndarray  # (m,)

    @property
    def count(self) -> int:
        return self.seed.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.seed, self.s_cw, self.v_cw, self.tl_cw, self.tr_cw, self.final_cw]

    def take(self, idx) -> "DCFKey":
        return DCFKey(
            self.party, self.ring, self.nbits,
            *(a[idx] for a in self.arrays()),
        )

    @staticmethod
    def concat(keys: list["DCFKey"]) -> "DCFKey":
        k0 = keys[0]
        cols = [np.concatenate(parts, axis=0) for parts in zip(*(k.arrays() for k in keys))]
        return DCFKey(k0.party, k0.ring, k0.nbits, *cols)


def _neg_where(v: np.ndarray, flag: np.ndarray) -> np.ndarray:
    return np.where(flag.astype(bool), np.uint64(0) - v, v)


def _select(bit: np.ndarray, if_one: np.ndarray, if_zero: np.ndarray) -> np.ndarray:
    b = bit.astype(bool)
    if if_one.ndim == 2:
        b = b[:, None]
    return np.where(b, if_one, if_zero)


def dcf_gen(alpha: np.ndarray, rng: np.random.Generator, ring: Ring, beta: int = 1):
    """Keys (k0, k1) with eval(k0, x) + eval(k1, x) = beta * 1{x <= alpha} mod 2^k."""
    alpha = ring.reduce(alpha).reshape(-1)
    m, n, mask = alpha.size, ring.k, ring.mask
    beta = np.uint64(beta % ring.modulus)

    seed0 = rng.integers(0, 2**64, size=(m, 2), dtype=RING_DTYPE)
    seed1 = rng.integers(0, 2**64, size=(m, 2), dtype=RING_DTYPE)
    s0, s1 = seed0.copy(), seed1.copy()
    t0 = np.zeros(m, dtype=np.uint8)
    t1 = np.ones(m, dtype=np.uint8)
    v_alpha = np.zeros(m, dtype=RING_DTYPE)

    s_cw = np.zeros((m, n, 2), dtype=RING_DTYPE)
    v_cw = np.zeros((m, n), dtype=RING_DTYPE)
    tl_cw = np.zeros((m, n), dtype=np.uint8)
    tr_cw = np.zeros((m, n), dtype=np.uint8)

    for i in range(n):
        a_i = ((alpha >> np.uint64(n - 1 - i)) & _ONE).astype(np.uint8)
        s0L, t0L, s0R, t0R, v0L, v0R = prg(s0)
        s1L, t1L, s1R, t1R, v1L, v1R = prg(s1)
        # keep the branch alpha takes, lose the other
        s0_lose, s1_lose = _select(a_i, s0L, s0R), _select(a_i, s1L, s1R)
        v0_lose, v1_lose = _select(a_i, v0L, v0R), _select(a_i, v1L, v1R)
        s0_keep, s1_keep = _select(a_i, s0R, s0L), _select(a_i, s1R, s1L)
        v0_keep, v1_keep = _select(a_i, v0R, v0L), _select(a_i, v1R, v1L)
        t0_keep, t1_keep = _select(a_i, t0R, t0L), _select(a_i, t1R, t1L)

        scw = s0_lose ^ s1_lose
        vcw = _neg_where(((v1_lose & mask) - (v0_lose & mask) - v_alpha), t1)
        # losing the left branch means every x down there is below alpha
        vcw = vcw + np.where(a_i.astype(bool), _neg_where(np.full(m, beta), t1), np.uint64(0))
        vcw &= mask
        v_alpha = (v_alpha - (v1_keep & mask) + (v0_keep & mask) + _neg_where(vcw, t1)) & mask

        tlcw = t0L ^ t1L ^ a_i ^ 1
        trcw = t0R ^ t1R ^ a_i
        t_keep_cw = _select(a_i, trcw, tlcw)

        s_cw[:, i], v_cw[:, i], tl_cw[:, i], tr_cw[:, i] = scw, vcw, tlcw, trcw
        s0 = s0_keep ^ (scw * t0[:, None].astype(RING_DTYPE))
        s1 = s1_keep ^ (scw * t1[:, None].astype(RING_DTYPE))
        t0 = t0_keep ^ (t0 & t_keep_cw)
        t1 = t1_keep ^ (t1 & t_keep_cw)

    # the leaf at x == alpha also outputs beta, giving <= rather than <
    final = _neg_where((s1[:, 0] & mask) - (s0[:, 0] & mask) - v_alpha + beta, t1) & mask

    def half(party, seed):
        return DCFKey(party, ring, n, seed, s_cw, v_cw, tl_cw, tr_cw, final)

    return half(0, seed0), half(1, seed1)


def dcf_eval(party: int, key: DCFKey, x: np.ndarray) -> np.ndarray:
    """Additive share of beta * 1{x <= alpha} for each (key, x) pair."""
    if party not in (0, 1):
        raise ValueError(f"DCF party must be 0 or 1, got {party}")
    ring, n, mask = key.ring, key.nbits, key.ring.mask
    x = ring.reduce(x).reshape(-1)
    if x.size != key.count:
        raise ValueError(f"{x.size} inputs for {key.count} keys")
    m = x.size
    s = key.seed.copy()
    t = np.full(m, party, dtype=np.uint8)
    acc = np.zeros(m, dtype=RING_DTYPE)
    for i in range(n):
        sL, tL, sR, tR, vL, vR = prg(s)
        tw = t[:, None].astype(RING_DTYPE)
        sL = sL ^ (key.s_cw[:, i] * tw)
        sR = sR ^ (key.s_cw[:, i] * tw)
        tL = tL ^ (t & key.tl_cw[:, i])
        tR = tR ^ (t & key.tr_cw[:, i])
        x_i = ((x >> np.uint64(n - 1 - i)) & _ONE).astype(np.uint8)
        v = _select(x_i, vR, vL) & mask
        acc = acc + v + key.v_cw[:, i] * t.astype(RING_DTYPE)
        s = _select(x_i, sR, sL)
        t = _select(x_i, tR, tL)
    acc = acc + (s[:, 0] & mask) + key.final_cw * t.astype(RING_DTYPE)
    if party == 1:
        acc = np.uint64(0) - acc
    return acc & mask
