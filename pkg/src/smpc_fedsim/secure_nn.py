"""Secret-shared CNN inference between two computing parties.

Linear layers are local on shares (im2col is just indexing); products use
Beaver triples followed by local truncation; ReLU, max pooling and argmax use
the masked comparison.  Correlated randomness is consumed in the exact order
produced by :func:`inference_plan`.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import binio
from .dealer import KIND_CMP, KIND_MATMUL, KIND_MUL, Dealer, PartyPool, require_pool
from .mpc_ops import (
    MASKED_TAGS, TAG_OUTPUT, beaver_matmul, beaver_mul, compare_leq_zero, one_minus,
    open_value, secure_max, secure_relu, truncate,
)
from .nn import Layer, ModelParams, ShapeError, im2col, layer_shapes
from .ring_fixed import FixedPointConfig, RangeError, decode_fixed, encode_fixed
from .sharing import ShareVector, add_shares, mul_public, reconstruct, share, sub_shares
from .simnet import Network, Transcript

log = logging.getLogger(__name__)

MODEL_MAGIC = b"SMPCMODL"
MODEL_VERSION = 1
_KIND_CODES = {"conv": 1, "relu": 2, "maxpool": 3, "avgpool": 4, "flatten": 5, "dense": 6}
_PLAIN_PARTY = 0xFF


@dataclass
class SecretTensor:
    """A tensor split between computing parties; shape metadata is public."""

    shape: tuple
    shares: dict
    cfg: FixedPointConfig

    def __post_init__(self):
        for s in self.shares.values():
            if s.shape != tuple(self.shape):
                raise ShapeError(f"share shape {s.shape} != tensor shape {self.shape}")

    @property
    def length(self) -> int:
        return int(np.prod(self.shape))

    def reveal(self) -> np.ndarray:
        return decode_fixed(reconstruct(list(self.shares.values())), self.cfg)


# -- encryption of models and inputs -------------------------------------------

def encrypt_model(model: ModelParams, cfg: FixedPointConfig, rng: np.random.Generator, n: int = 2) -> ModelParams:
    """Encode every weight at ``cfg`` and share it among ``n`` parties."""
    if model.mode != "plain":
        raise ValueError("model is already shared")
    layers = []
    for layer in model.layers:
        if not layer.has_params:
            layers.append(Layer(layer.kind))
            continue
        w = share(encode_fixed(layer.weight, cfg), n, rng, cfg.ring)
        b = share(encode_fixed(layer.bias, cfg), n, rng, cfg.ring)
        layers.append(Layer(layer.kind, {s.party: s for s in w}, {s.party: s for s in b}))
    return ModelParams(layers, model.input_shape, "shared", cfg, tuple(range(n)))


def decrypt_model(model: ModelParams) -> ModelParams:
    if model.mode != "shared":
        raise ValueError("model is not shared")
    layers = []
    for layer in model.layers:
        if not layer.has_params:
            layers.append(Layer(layer.kind))
            continue
        w = decode_fixed(reconstruct(list(layer.weight.values())), model.cfg)
        b = decode_fixed(reconstruct(list(layer.bias.values())), model.cfg)
        layers.append(Layer(layer.kind, w, b))
    return ModelParams(layers, model.input_shape, "plain")


def party_view(model: ModelParams, party: int) -> ModelParams:
    """The single-party slice of a shared model (what that party stores)."""
    layers = [
        Layer(l.kind, {party: l.weight[party]}, {party: l.bias[party]}) if l.has_params else Layer(l.kind)
        for l in model.layers
    ]
    return ModelParams(layers, model.input_shape, "shared", model.cfg, (party,))


def merge_views(views: Sequence[ModelParams]) -> ModelParams:
    first = views[0]
    layers = []
    for i, layer in enumerate(first.layers):
        if not layer.has_params:
            layers.append(Layer(layer.kind))
            continue
        w, b = {}, {}
        for v in views:
            w.update(v.layers[i].weight)
            b.update(v.layers[i].bias)
        layers.append(Layer(layer.kind, w, b))
    parties = tuple(sorted(p for v in views for p in v.parties))
    return ModelParams(layers, first.input_shape, "shared", first.cfg, parties)


def encrypt_input(X: np.ndarray, cfg: FixedPointConfig, seed: int, sample_ids: Sequence[int]) -> SecretTensor:
    """Share a batch between parties 0 and 1, one RNG stream per sample id."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) != len(sample_ids):
        raise ValueError("need one sample id per input")
    enc = encode_fixed(X, cfg)
    parts = [share(enc[i], 2, np.random.default_rng([seed, sid, 0x1]), cfg.ring) for i, sid in enumerate(sample_ids)]
    shares = {p: ShareVector(p, np.stack([s[p].values for s in parts]), cfg.ring) for p in (0, 1)}
    return SecretTensor(tuple(X.shape), shares, cfg)


# -- layer protocols (run inside one party's program) ---------------------------

def secure_conv2d(ctx, x: ShareVector, weight: ShareVector, bias: ShareVector, pool: PartyPool, cfg):
    """Valid, stride-1 convolution of a (B, C, H, W) share by (F, C, kh, kw) kernels."""
    B, C, H, W = x.shape
    F, C2, kh, kw = weight.shape
    if C2 != C or kh > H or kw > W:
        raise ShapeError(f"conv {weight.shape} cannot take input {x.shape}")
    cols = ShareVector(x.party, np.ascontiguousarray(im2col(x.values, kh, kw)), x.ring)
    wmat = ShareVector(x.party, weight.values.reshape(F, -1).T, x.ring)
    t = pool.take(KIND_MATMUL, cols.shape)
    z = yield from beaver_matmul(ctx, cols, wmat, t)
    z = truncate(z, cfg.f)
    z = ShareVector(x.party, z.values + bias.values, x.ring)
    OH, OW = H - kh + 1, W - kw + 1
    return ShareVector(x.party, z.values.transpose(0, 2, 1).reshape(B, F, OH, OW), x.ring)


def secure_dense(ctx, x: ShareVector, weight: ShareVector, bias: ShareVector, pool: PartyPool, cfg):
    """(B, n) share times shared (n, m) weights plus bias, rescaled once."""
    B, n = x.shape
    if weight.shape[0] != n:
        raise ShapeError(f"dense {weight.shape} cannot take input {x.shape}")
    t = pool.take(KIND_MATMUL, (B, 1, n))
    z = yield from beaver_matmul(ctx, x.reshape(B, 1, n), weight, t)
    z = truncate(z, cfg.f).reshape(B, weight.shape[1])
    return ShareVector(x.party, z.values + bias.values, x.ring)


def _windows(x: ShareVector) -> np.ndarray:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"2x2 pooling needs even spatial dims, got {x.shape}")
    v = x.values.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return v.reshape(B, C, H // 2, W // 2, 4)


def secure_maxpool2(ctx, x: ShareVector, pool: PartyPool):
    """Tournament max over each 2x2 window: 3 comparisons in 2 rounds."""
    win = _windows(x)
    u = ShareVector(x.party, win[..., [0, 2]], x.ring)
    v = ShareVector(x.party, win[..., [1, 3]], x.ring)
    m = yield from secure_max(ctx, u, v, pool.take(KIND_CMP, u.shape), pool.take(KIND_MUL, u.shape))
    out = yield from secure_max(
        ctx, m[..., 0], m[..., 1],
        pool.take(KIND_CMP, m.shape[:-1]), pool.take(KIND_MUL, m.shape[:-1]),
    )
    return out


def secure_avgpool2(x: ShareVector, cfg: FixedPointConfig) -> ShareVector:
    """Window sum times encode(1/4), then rescale; local, no communication."""
    s = ShareVector(x.party, _windows(x).sum(axis=-1), x.ring)
    return truncate(mul_public(s, encode_fixed(0.25, cfg)), cfg.f)


def secure_argmax(ctx, logits: ShareVector, pool: PartyPool):
    """Shared index of the row maximum; ties go to the lowest index.

    Pairs (lower, higher) index candidates and keeps the higher one only if it
    is strictly larger, so the left (lower-index) candidate wins ties.
    """
    B, c = logits.shape
    vals = logits.values
    idx = np.broadcast_to(np.arange(c, dtype=np.uint64), (B, c))
    if ctx.party != 0:
        idx = np.zeros_like(idx)
    while vals.shape[1] > 1:
        p = vals.shape[1] // 2
        u = ShareVector(ctx.party, vals[:, 0:2 * p:2], logits.ring)
        v = ShareVector(ctx.party, vals[:, 1:2 * p:2], logits.ring)
        iu = ShareVector(ctx.party, idx[:, 0:2 * p:2], logits.ring)
        iv = ShareVector(ctx.party, idx[:, 1:2 * p:2], logits.ring)
        leq = yield from compare_leq_zero(ctx, sub_shares(v, u), pool.take(KIND_CMP, (B, p)))
        gt = one_minus(leq)
        diffs = ShareVector(ctx.party, np.stack([(v.values - u.values), (iv.values - iu.values)], axis=1), logits.ring)
        bits = ShareVector(ctx.party, np.stack([gt.values, gt.values], axis=1), logits.ring)
        sel = yield from beaver_mul(ctx, diffs, bits, pool.take(KIND_MUL, (B, 2, p)))
        new_vals = u.values + sel.values[:, 0]
        new_idx = iu.values + sel.values[:, 1]
        if vals.shape[1] % 2:
            new_vals = np.concatenate([new_vals, vals[:, -1:]], axis=1)
            new_idx = np.concatenate([new_idx, idx[:, -1:]], axis=1)
        vals, idx = new_vals & logits.ring.mask, new_idx & logits.ring.mask
    return ShareVector(ctx.party, idx[:, 0], logits.ring)


def inference_plan(model: ModelParams) -> list[tuple]:
    """Per-sample correlated-randomness requests, in consumption order."""
    shapes = layer_shapes(model.layers, model.input_shape, model.mode)
    plan, shape = [], tuple(model.input_shape)
    for layer, out_shape in zip(model.layers, shapes):
        if layer.kind == "conv":
            C, H, W = shape
            F, _, kh, kw = _weight_shape(layer)
            P, K = (H - kh + 1) * (W - kw + 1), C * kh * kw
            plan.append((KIND_MATMUL, (P, K), (K, F)))
        elif layer.kind == "dense":
            n, m = _weight_shape(layer)
            plan.append((KIND_MATMUL, (1, n), (n, m)))
        elif layer.kind == "relu":
            plan += [(KIND_CMP, shape), (KIND_MUL, shape)]
        elif layer.kind == "maxpool":
            C, h, w = out_shape
            plan += [(KIND_CMP, (C, h, w, 2)), (KIND_MUL, (C, h, w, 2))]
            plan += [(KIND_CMP, (C, h, w)), (KIND_MUL, (C, h, w))]
        shape = out_shape
    if len(shape) != 1:
        raise ShapeError(f"model must end in a vector of logits, got {shape}")
    c = shape[0]
    while c > 1:
        p = c // 2
        plan += [(KIND_CMP, (p,)), (KIND_MUL, (2, p))]
        c = p + c % 2
    return plan


def _weight_shape(layer: Layer):
    if isinstance(layer.weight, dict):
        return next(iter(layer.weight.values())).shape
    return layer.weight.shape


def inference_program(ctx, model: ModelParams, x: ShareVector, pool: PartyPool):
    """One computing party's side of a batched encrypted inference."""
    cfg, p = model.cfg, ctx.party
    h = x
    for layer in model.layers:
        if layer.kind == "conv":
            h = yield from secure_conv2d(ctx, h, layer.weight[p], layer.bias[p], pool, cfg)
        elif layer.kind == "dense":
            h = yield from secure_dense(ctx, h, layer.weight[p], layer.bias[p], pool, cfg)
        elif layer.kind == "relu":
            h = yield from secure_relu(ctx, h, pool.take(KIND_CMP, h.shape), pool.take(KIND_MUL, h.shape))
        elif layer.kind == "maxpool":
            h = yield from secure_maxpool2(ctx, h, pool)
        elif layer.kind == "avgpool":
            h = secure_avgpool2(h, cfg)
        elif layer.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
    idx = yield from secure_argmax(ctx, h, pool)
    opened = yield from open_value(ctx, idx, tag=TAG_OUTPUT)
    return opened.value.astype(np.int64)


@dataclass
class InferenceResult:
    predictions: np.ndarray
    session: str
    sim_time: float
    bytes: int
    messages: int


def encrypted_inference(model: ModelParams, x: SecretTensor, pools: tuple, net: Network, session: str = "infer") -> InferenceResult:
    """Run both parties' programs; only the argmax index is ever revealed."""
    if model.mode != "shared" or set(model.parties) != {0, 1}:
        raise ValueError("need a model shared between parties 0 and 1")
    outs = net.run(
        {p: (lambda ctx, p=p: inference_program(ctx, party_view(model, p), x.shares[p], pools[p]))
         for p in (0, 1)},
        session=session,
    )
    if not np.array_equal(outs[0], outs[1]):
        raise RuntimeError("parties disagree on the revealed output")
    recs = net.transcript.session_records(session)
    return InferenceResult(outs[0], session, net.session_time(session), sum(r.nbytes for r in recs), len(recs))


def prepare_pools(model: ModelParams, dealer: Dealer, sample_ids: Sequence[int]) -> tuple:
    plan = inference_plan(model)
    items = dealer.material(plan, sample_ids)
    require_pool(plan, items)
    return PartyPool(0, items), PartyPool(1, items)


def run_inference(shared_model: ModelParams, X: np.ndarray, sample_ids: Sequence[int], seed: int,
                  net: Network, session: str = "infer") -> InferenceResult:
    """Dealer setup, input sharing and the online phase for one batch."""
    cfg = shared_model.cfg
    dealer = Dealer(cfg, seed)
    pools = prepare_pools(shared_model, dealer, sample_ids)
    x = encrypt_input(X, cfg, seed, sample_ids)
    return encrypted_inference(shared_model, x, pools, net, session)


# -- transcript audit ---------------------------------------------------------

class AuditError(AssertionError):
    pass


def audit_transcript(transcript: Transcript, session: str, batch: int, ring_bytes: int = 8) -> dict:
    """Check that every opened value in ``session`` was masked or is the output.

    Masked opens must carry a mask id used at most once per sender, and the
    only unmasked opens are the final argmax indices, one per party.
    """
    counts: Counter = Counter()
    used = set()
    for r in transcript.session_records(session):
        if r.tag in MASKED_TAGS:
            if not r.mask_id:
                raise AuditError(f"masked open without a mask id: {r}")
            key = (r.src, r.mask_id)
            if key in used:
                raise AuditError(f"mask {r.mask_id} reused by party {r.src}")
            used.add(key)
        elif r.tag == TAG_OUTPUT:
            if r.nbytes != batch * ring_bytes:
                raise AuditError(f"output open carries {r.nbytes} bytes for {batch} samples")
        else:
            raise AuditError(f"unexpected message tag {r.tag!r} in session {session}")
        counts[r.tag] += 1
    if counts[TAG_OUTPUT] != 2:
        raise AuditError(f"expected one output open per party, saw {counts[TAG_OUTPUT]}")
    return dict(counts)


# -- model files --------------------------------------------------------------

def save_model(path, model: ModelParams, cfg: FixedPointConfig | None = None, party: int | None = None):
    """Write SMPCMODL: magic, version u16, k u16, f u16, mode u8, party u8,
    input shape, layer count u16, then per layer kind u8, tensor count u8
    and each tensor as dims plus little-endian k-bit ring elements.
    """
    cfg = cfg or model.cfg
    if model.mode == "shared":
        if party is None:
            if len(model.parties) != 1:
                raise ValueError("shared models are saved one party per file; pass party=")
            party = model.parties[0]
    nbytes = cfg.ring.nbytes
    with open(path, "wb") as fh:
        binio.write_magic(fh, MODEL_MAGIC, MODEL_VERSION)
        binio.write_u16(fh, cfg.k)
        binio.write_u16(fh, cfg.f)
        binio.write_u8(fh, 0 if model.mode == "plain" else 1)
        binio.write_u8(fh, _PLAIN_PARTY if model.mode == "plain" else party)
        binio.write_u8(fh, len(model.input_shape))
        for d in model.input_shape:
            binio.write_u32(fh, d)
        binio.write_u16(fh, len(model.layers))
        for layer in model.layers:
            binio.write_u8(fh, _KIND_CODES[layer.kind])
            if not layer.has_params:
                binio.write_u8(fh, 0)
                continue
            binio.write_u8(fh, 2)
            for t in (layer.weight, layer.bias):
                vals = encode_fixed(t, cfg) if model.mode == "plain" else t[party].values
                binio.write_ring_array(fh, vals, nbytes)


def load_model(path) -> ModelParams:
    kinds = {v: k for k, v in _KIND_CODES.items()}
    with open(path, "rb") as fh:
        binio.read_magic(fh, MODEL_MAGIC, MODEL_VERSION)
        cfg = FixedPointConfig(binio.read_u16(fh), binio.read_u16(fh))
        mode = "plain" if binio.read_u8(fh) == 0 else "shared"
        party = binio.read_u8(fh)
        input_shape = tuple(binio.read_u32(fh) for _ in range(binio.read_u8(fh)))
        layers = []
        for _ in range(binio.read_u16(fh)):
            code = binio.read_u8(fh)
            if code not in kinds:
                raise binio.FormatError(f"unknown layer kind {code}")
            tensors = [binio.read_ring_array(fh, cfg.ring.nbytes) for _ in range(binio.read_u8(fh))]
            if not tensors:
                layers.append(Layer(kinds[code]))
            elif mode == "plain":
                layers.append(Layer(kinds[code], *(decode_fixed(t, cfg) for t in tensors)))
            else:
                w, b = (ShareVector(party, t, cfg.ring) for t in tensors)
                layers.append(Layer(kinds[code], {party: w}, {party: b}))
    parties = () if mode == "plain" else (party,)
    model = ModelParams(layers, input_shape, mode, cfg, parties)
    model.shapes()
    return model


__all__ = [
    "SecretTensor", "encrypt_model", "decrypt_model", "encrypt_input", "party_view", "merge_views",
    "secure_conv2d", "secure_dense", "secure_maxpool2", "secure_avgpool2", "secure_argmax",
    "inference_plan", "inference_program", "encrypted_inference", "prepare_pools", "run_inference",
    "InferenceResult", "audit_transcript", "AuditError", "save_model", "load_model", "RangeError",
]
