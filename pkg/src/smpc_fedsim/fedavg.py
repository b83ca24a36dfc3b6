"""Federated averaging with secret-shared aggregation.

Hospitals train locally in plaintext, then share their models between the
two computing parties.  The parties add shares locally, never talking to
each other, so the aggregate stays secret-shared.  The exact sum is revealed
to the hospitals for the next round of local training; each party also
rescales its share locally into the encrypted global model kept for
inference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .mpc_ops import truncate
from .nn import ModelParams, ShapeError, evaluate, sgd_epoch
from .ring_fixed import FixedPointConfig, decode_fixed, encode_fixed, ring_add
from .sharing import ShareVector, add_shares, reconstruct, share
from .simnet import LinkModel, Network, ProtocolAbort

log = logging.getLogger(__name__)

# Hospitals encode their weighted contribution with this many extra
# fractional bits; the parties remove them with one truncation.
AGG_EXTRA_BITS = 8

TAG_SHARE = "share:input"
TAG_REVEAL = "reveal:global"
COMPUTING_PARTIES = (0, 1)


@dataclass
class HospitalState:
    id: int
    data: Dataset
    model: ModelParams
    link: LinkModel | None = None

    @property
    def party(self) -> str:
        return f"H{self.id}"


@dataclass(frozen=True)
class TrainingConfig:
    rounds: int = 15
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 16
    seed: int = 0
    parties: int = 2
    weighted: bool = False

    def __post_init__(self):
        for name in ("rounds", "local_epochs", "batch_size", "parties"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.parties != 2:
            raise ValueError("aggregation runs between exactly two computing parties")


def local_train(h: HospitalState, cfg: TrainingConfig, round_index: int = 0) -> tuple[ModelParams, float]:
    """Plain minibatch SGD on the hospital's data, starting from ``h.model``."""
    if len(h.data) == 0:
        raise ValueError(f"hospital {h.id} has an empty dataset")
    model = h.model.copy()
    rng = np.random.default_rng([cfg.seed, round_index, h.id])
    loss = float("nan")
    for _ in range(cfg.local_epochs):
        loss = sgd_epoch(model, h.data.X, h.data.y, cfg.lr, cfg.batch_size, rng)
    return model, loss


def _check_same_shape(models: Sequence[ModelParams]):
    ref = [a.shape for a in models[0].param_arrays()]
    for i, m in enumerate(models[1:], 1):
        if [a.shape for a in m.param_arrays()] != ref:
            raise ShapeError(f"model {i} has different parameter shapes")


def _agg_weights(n: int, weights) -> np.ndarray:
    return np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float) / np.sum(weights)


def _wide(cfg: FixedPointConfig) -> FixedPointConfig:
    return FixedPointConfig(cfg.k, cfg.f + AGG_EXTRA_BITS)


def fedavg_fixed(models: Sequence[ModelParams], cfg: FixedPointConfig,
                 weights: Sequence[float] | None = None) -> ModelParams:
    """Plaintext twin of the secure aggregate: the same wide fixed-point
    contributions summed exactly, with no sharing.  Equal bit for bit to what
    the hospitals reconstruct from the secure run."""
    if not models:
        raise ValueError("nothing to average")
    _check_same_shape(models)
    w, wide = _agg_weights(len(models), weights), _wide(cfg)
    total = np.zeros(models[0].num_params, dtype=np.uint64)
    for wi, m in zip(w, models):
        total = ring_add(total, encode_fixed(wi * m.flat(), wide), wide)
    return models[0].with_flat(decode_fixed(total, wide))


def fedavg_plain(models: Sequence[ModelParams], weights: Sequence[float] | None = None) -> ModelParams:
    """Elementwise (optionally weighted) mean of parameters."""
    if not models:
        raise ValueError("nothing to average")
    _check_same_shape(models)
    flats = np.stack([m.flat() for m in models])
    if weights is None:
        avg = flats.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        avg = (w[:, None] * flats).sum(axis=0) / w.sum()
    return models[0].with_flat(avg)


@dataclass
class AggregationResult:
    shares: dict  # computing party -> ShareVector of the flat global model, scale 2^f
    wide_shares: dict  # the untruncated sum, scale 2^(f + AGG_EXTRA_BITS)
    template: ModelParams
    cfg: FixedPointConfig
    session: str
    bytes: int

    def reveal(self) -> ModelParams:
        """The exact aggregate, as the hospitals reconstruct it."""
        flat = decode_fixed(reconstruct([self.wide_shares[p] for p in COMPUTING_PARTIES]), _wide(self.cfg))
        return self.template.with_flat(flat)

    def shared_model(self) -> ModelParams:
        """The encrypted global model in layer form (both parties' shares)."""
        layers, pos = [], 0
        out = self.template.copy()
        for layer in out.layers:
            if layer.has_params:
                for name in ("weight", "bias"):
                    arr = getattr(layer, name)
                    part = {
                        p: ShareVector(p, self.shares[p].values[pos:pos + arr.size].reshape(arr.shape), self.cfg.ring)
                        for p in COMPUTING_PARTIES
                    }
                    setattr(layer, name, part)
                    pos += arr.size
            layers.append(layer)
        return ModelParams(layers, out.input_shape, "shared", self.cfg, COMPUTING_PARTIES)


def secure_aggregate(models: Sequence[ModelParams], net: Network, cfg: FixedPointConfig, seed: int,
                     session: str = "agg", weights: Sequence[float] | None = None) -> AggregationResult:
    """Secret-shared FedAvg of hospital models.

    Each hospital i encodes w_i * params_i (w_i = 1/n by default) with
    AGG_EXTRA_BITS extra fractional bits and sends one share to each
    computing party.  Each party sums its shares, which is exact, and
    truncates a copy once for the encrypted global model (within 2 LSB of
    the plain average).  Neither party ever reconstructs anything.
    """
    n = len(models)
    if n < 2:
        raise ValueError("secure aggregation needs at least two hospitals")
    _check_same_shape(models)
    w, wide = _agg_weights(n, weights), _wide(cfg)
    ring = cfg.ring
    size = models[0].num_params

    def hospital(i):
        def program(ctx):
            enc = encode_fixed(w[i] * models[i].flat(), wide)
            shares = share(enc, 2, np.random.default_rng([seed, i]), ring)
            ctx.compute(2 * size)
            for p in COMPUTING_PARTIES:
                ctx.send(p, ring.to_bytes(shares[p].values), tag=TAG_SHARE)
        return program

    def party(p):
        def program(ctx):
            acc = ShareVector(p, np.zeros(size, dtype=np.uint64), ring)
            for i in range(n):
                msg = yield ctx.recv(f"H{i}")
                acc = add_shares(acc, ShareVector(p, ring.from_bytes(msg.payload, (size,)), ring))
            ctx.compute(n * size)
            return acc, truncate(acc, AGG_EXTRA_BITS)
        return program

    programs = {f"H{i}": hospital(i) for i in range(n)}
    programs.update({p: party(p) for p in COMPUTING_PARTIES})
    outs = net.run(programs, seed=seed, session=session)
    return AggregationResult(
        {p: outs[p][1] for p in COMPUTING_PARTIES}, {p: outs[p][0] for p in COMPUTING_PARTIES},
        models[0], cfg, session, net.transcript.session_bytes(session),
    )


def reveal_to_hospitals(agg: AggregationResult, n_hospitals: int, net: Network, session: str) -> ModelParams:
    """Both parties send their shares of the exact sum to every hospital,
    which reconstructs."""
    ring, size = agg.cfg.ring, agg.wide_shares[0].length

    def party(p):
        def program(ctx):
            for i in range(n_hospitals):
                ctx.send(f"H{i}", ring.to_bytes(agg.wide_shares[p].values), tag=TAG_REVEAL)
        return program

    def hospital(i):
        def program(ctx):
            parts = []
            for p in COMPUTING_PARTIES:
                msg = yield ctx.recv(p)
                parts.append(ShareVector(p, ring.from_bytes(msg.payload, (size,)), ring))
            ctx.compute(size)
            return agg.template.with_flat(decode_fixed(reconstruct(parts), _wide(agg.cfg)))
        return program

    programs = {p: party(p) for p in COMPUTING_PARTIES}
    programs.update({f"H{i}": hospital(i) for i in range(n_hospitals)})
    outs = net.run(programs, session=session)
    return outs["H0"]


@dataclass
class FLResult:
    rows: list = field(default_factory=list)
    global_model: ModelParams | None = None
    shared_global: ModelParams | None = None
    aborted: str | None = None

    def accuracies(self, split: str) -> list[float]:
        return [r["accuracy"] for r in self.rows if r["hospital_id"] == "global" and r["split"] == split]


def fl_run(hospitals: Sequence[HospitalState], cfg: TrainingConfig, net: Network, fp: FixedPointConfig,
           validation: Dataset, plain_aggregation: bool = False) -> FLResult:
    """Rounds of local training then aggregation; one metrics row per hospital
    (split ``local_train``) and two global rows (``train``, ``validation``)
    per round.  A protocol abort stops the run and is recorded with its round.
    """
    result = FLResult()
    n = len(hospitals)
    union = Dataset(
        np.concatenate([h.data.X for h in hospitals]),
        np.concatenate([h.data.y for h in hospitals]),
        hospitals[0].data.class_names,
    )
    sizes = [len(h.data) for h in hospitals]
    for r in range(1, cfg.rounds + 1):
        before = net.transcript.total_bytes
        sim_ms = 0.0
        locals_ = []
        for h in hospitals:
            model, _ = local_train(h, cfg, r)
            acc, loss = evaluate(model, h.data.X, h.data.y)
            locals_.append(model)
            result.rows.append(_row(r, h.id, "local_train", acc, loss, 0, 0.0))
        weights = sizes if cfg.weighted else None
        try:
            if n == 1:
                global_model = locals_[0]
            elif plain_aggregation:
                global_model = fedavg_fixed(locals_, fp, weights)
            else:
                agg = secure_aggregate(locals_, net, fp, seed=cfg.seed * 1_000_003 + r,
                                       session=f"agg{r}", weights=weights)
                global_model = reveal_to_hospitals(agg, n, net, session=f"reveal{r}")
                result.shared_global = agg.shared_model()
                sim_ms = 1e3 * (net.session_time(f"agg{r}") + net.session_time(f"reveal{r}"))
        except ProtocolAbort as exc:
            result.aborted = f"round {r}: {exc}"
            log.error("aggregation aborted in round %d: %s", r, exc)
            break
        for h in hospitals:
            h.model = global_model.copy()
        sent = net.transcript.total_bytes - before
        for split, ds in (("train", union), ("validation", validation)):
            acc, loss = evaluate(global_model, ds.X, ds.y)
            result.rows.append(_row(r, "global", split, acc, loss, sent, sim_ms))
        result.global_model = global_model
        log.info("round %d: validation accuracy %.4f", r, result.rows[-1]["accuracy"])
    return result


def _row(r, hid, split, acc, loss, sent, ms):
    return {
        "round": r, "hospital_id": hid, "split": split, "accuracy": acc,
        "loss": loss, "bytes_sent": sent, "wall_ms": ms,
    }
