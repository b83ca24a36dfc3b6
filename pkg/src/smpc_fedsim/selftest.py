"""Self-test suites: each checks an implementation against an independent
oracle and returns a :class:`SuiteResult` instead of raising."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dealer import KIND_CMP, BeaverTriple, IdentityViolation, gen_beaver, gen_comparison_key, load_randomness
from .fedavg import fedavg_plain, secure_aggregate
from .mpc_ops import beaver_mul, compare_leq_zero, run_pair, truncate
from .nn import Layer, ModelParams
from .ring_fixed import FixedPointConfig, Ring, decode_fixed, encode_fixed
from .sharing import ShareVector, reconstruct, share
from .simnet import Network

log = logging.getLogger(__name__)

SELFTEST_COLUMNS = ["suite", "passed", "checks", "failures", "detail"]


@dataclass
class SuiteResult:
    suite: str
    passed: bool
    checks: int
    failures: int
    detail: str = ""

    def row(self) -> dict:
        return {"suite": self.suite, "passed": int(self.passed), "checks": self.checks,
                "failures": self.failures, "detail": self.detail}


def share_roundtrip(seed: int, trials: int = 10_000, parties=(2, 3, 5), sum_pairs: int = 500) -> SuiteResult:
    """Random share/reconstruct round-trips plus the share-sum identity.

    For the identity, m_1..m_h are shared between two parties; the sums u and
    s of each party's shares must satisfy u + s = sum(m_i) mod 2^k.
    """
    rng = np.random.default_rng([seed, 1])
    checks = failures = 0
    widths = (8, 16, 32, 64)
    for n in parties:
        # each row of a (trials/len(widths), length) block is one round trip
        for k in widths:
            ring = Ring(k)
            secret = ring.random(rng, (trials // len(widths), int(rng.integers(1, 9))))
            got = reconstruct(share(secret, n, rng, ring))
            checks += len(secret)
            failures += int(np.count_nonzero((got != secret).any(axis=1)))
    ring = Ring(64)
    h = rng.integers(2, 9, size=sum_pairs)
    m = ring.random(rng, (sum_pairs, 8)) * (np.arange(8) < h[:, None])
    s0, s1 = share(m, 2, rng, ring)
    u = s0.values.sum(axis=1, dtype=np.uint64) & ring.mask
    s = s1.values.sum(axis=1, dtype=np.uint64) & ring.mask
    checks += sum_pairs
    failures += int(np.count_nonzero(((u + s) & ring.mask) != (m.sum(axis=1, dtype=np.uint64) & ring.mask)))
    return SuiteResult("share_roundtrip", failures == 0, checks, failures,
                       f"n in {list(parties)}, {sum_pairs} share-sum identities")


def _compare_batch(ring: Ring, masks: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    """Run the two-party comparison protocol on every (mask, y) pair."""
    rng = np.random.default_rng([seed, ring.k])
    k0, k1 = gen_comparison_key(rng, ring, id="cmp", mask=masks)
    y0, y1 = share(ring.reduce(y), 2, rng, ring)
    out0, out1 = run_pair(compare_leq_zero, (y0, k0), (y1, k1), seed=seed, session=f"cmp{ring.k}")
    return reconstruct([out0, out1])


def fss_exhaustive(k: int, seed: int, full: bool = False) -> SuiteResult:
    """Every mask in Z_{2^k} against every y with |y| < 2^(k-2), or against
    the whole signed range when ``full``."""
    ring = Ring(k)
    if full:
        ys = np.arange(-(1 << (k - 1)), 1 << (k - 1), dtype=np.int64)
    else:
        bound = 1 << (k - 2)
        ys = np.arange(-bound + 1, bound, dtype=np.int64)
    masks = np.repeat(np.arange(1 << k, dtype=np.uint64), len(ys))
    y = np.tile(ys, 1 << k)
    got = _compare_batch(ring, masks, y.astype(np.uint64), seed)
    bad = int(np.count_nonzero(got != (y <= 0)))
    return SuiteResult(f"fss_exhaustive_k{k}" + ("_full" if full else ""), bad == 0, len(y), bad,
                       f"{1 << k} masks x {len(ys)} inputs")


def fss_spot(k: int, seed: int, count: int = 100_000) -> SuiteResult:
    ring = Ring(k)
    rng = np.random.default_rng([seed, 2, k])
    bound = 1 << (k - 2)
    y = rng.integers(-bound + 1, bound, size=count, dtype=np.int64)
    y[: min(count, 3)] = [0, 1, -1][: min(count, 3)]
    masks = ring.random(rng, (count,))
    got = _compare_batch(ring, masks, y.astype(np.uint64), seed)
    bad = int(np.count_nonzero(got != (y <= 0)))
    return SuiteResult(f"fss_spot_k{k}", bad == 0, count, bad, "uniform masks, |y| < 2^(k-2)")


def _check_identities(items) -> tuple[int, list[str]]:
    checked, errors = 0, []
    for item in items:
        if isinstance(item, BeaverTriple):
            checked += 1
            try:
                item.check()
            except IdentityViolation as exc:
                errors.append(str(exc))
    return checked, errors


def beaver_sweep(seed: int, pairs: int = 10_000, cfg: FixedPointConfig | None = None,
                 randomness: str | None = None, magnitude: float = 16.0) -> SuiteResult:
    """Fixed-point Beaver products against the decoded-operand float product.

    Operands are uniform in [-magnitude, magnitude].  Every triple involved
    (the sweep's own, and any loaded from ``randomness``) must satisfy
    c = a*b exactly in the ring.
    """
    cfg = cfg or FixedPointConfig()
    ring = cfg.ring
    rng = np.random.default_rng([seed, 3])
    items = gen_beaver(1, (pairs,), rng, ring, prefix="sweep")
    source = "generated"
    if randomness is not None:
        _, loaded = load_randomness(randomness)
        items = items + list(loaded)
        source = f"generated + {randomness}"
    checked, errors = _check_identities(items)
    if errors:
        return SuiteResult("beaver", False, checked, len(errors), "identity violation: " + "; ".join(errors[:3]))

    xs = rng.uniform(-magnitude, magnitude, pairs)
    ys = rng.uniform(-magnitude, magnitude, pairs)
    ex, ey = encode_fixed(xs, cfg), encode_fixed(ys, cfg)
    x0, x1 = share(ex, 2, rng, ring)
    y0, y1 = share(ey, 2, rng, ring)
    t = items[0]

    def prog(ctx, x, y, tr):
        z = yield from beaver_mul(ctx, x, y, tr)
        return truncate(z, cfg.f)

    z0, z1 = run_pair(prog, (x0, y0, t.for_party(0)), (x1, y1, t.for_party(1)), seed=seed, session="beaver")
    got = decode_fixed(reconstruct([z0, z1]), cfg)
    want = decode_fixed(ex, cfg) * decode_fixed(ey, cfg)
    tol = 2.0 ** (-cfg.f + 1)
    err = np.abs(got - want)
    bad = int(np.count_nonzero(err > tol))
    return SuiteResult("beaver", bad == 0, pairs + checked, bad,
                       f"{checked} triple batches ({source}); max error {err.max() * 2**cfg.f:.3f} LSB")


def _flat_model(values: np.ndarray) -> ModelParams:
    w = values[:-1].reshape(-1, 1)
    return ModelParams([Layer("dense", w, values[-1:])], (w.shape[0],))


def aggregation_exactness(seed: int, cases=((3, 1_000), (5, 10_000), (8, 100_000)),
                          cfg: FixedPointConfig | None = None) -> SuiteResult:
    """The revealed aggregate and the encrypted global model vs fedavg_plain,
    each within 2 LSB per element."""
    cfg = cfg or FixedPointConfig()
    rng = np.random.default_rng([seed, 4])
    checks = bad = 0
    worst = 0.0
    for i, (n, size) in enumerate(cases):
        models = [_flat_model(rng.normal(0, 0.5, size)) for _ in range(n)]
        agg = secure_aggregate(models, Network(), cfg, seed=seed + i, session=f"agg{i}")
        want = fedavg_plain(models).flat()
        for got in (agg.reveal().flat(), decode_fixed(reconstruct(list(agg.shares.values())), cfg)):
            err = np.abs(got - want) * cfg.scale
            worst = max(worst, float(err.max()))
            checks += size
            bad += int(np.count_nonzero(err > 2.0))
    return SuiteResult("aggregation", bad == 0, checks, bad, f"max error {worst:.3f} LSB")


def randomness_items_summary(path) -> dict:
    cfg, items = load_randomness(path)
    kinds = {}
    for it in items:
        kind = it.kind if isinstance(it, BeaverTriple) else KIND_CMP
        kinds[kind] = kinds.get(kind, 0) + 1
    return {"k": cfg.k, "f": cfg.f, "items": len(items), **kinds}


def run_all(seed: int, randomness: str | None = None) -> list[SuiteResult]:
    suites = [
        lambda: share_roundtrip(seed),
        lambda: fss_exhaustive(8, seed),
        lambda: beaver_sweep(seed, randomness=randomness),
        lambda: aggregation_exactness(seed),
    ]
    names = ["share_roundtrip", "fss_exhaustive_k8", "beaver", "aggregation"]
    results = []
    for name, fn in zip(names, suites):
        try:
            res = fn()
        except Exception as exc:  # a broken suite is a failed suite, not a crash
            res = SuiteResult(name, False, 0, 1, f"error: {exc}")
        log.info("%s: %s (%d checks, %d failures) %s", res.suite, "pass" if res.passed else "FAIL",
                 res.checks, res.failures, res.detail)
        results.append(res)
    return results


__all__ = [
    "SuiteResult", "SELFTEST_COLUMNS", "share_roundtrip", "fss_exhaustive", "fss_spot",
    "beaver_sweep", "aggregation_exactness", "run_all", "ShareVector",
]
