"""Release gate: one test per acceptance criterion, each at its stated
tolerance and runtime budget.  Every test records a ``criterion N: PASS|FAIL``
line that is echoed in the pytest terminal summary.
"""

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, chi2_uniform_pvalue
from smpc_fedsim.cli import EXIT_OK, load_data, load_shared_model, main
from smpc_fedsim.config import DataConfig
from smpc_fedsim.data import blob_dataset
from smpc_fedsim.dealer import gen_beaver
from smpc_fedsim.nn import argmax_lowest, error_budget_lsb, fixedpoint_forward, forward
from smpc_fedsim.report import linear_fit, read_csv
from smpc_fedsim.ring_fixed import FixedPointConfig, Ring
from smpc_fedsim.secure_nn import audit_transcript, decrypt_model, run_inference
from smpc_fedsim.selftest import aggregation_exactness, beaver_sweep, fss_exhaustive, fss_spot
from smpc_fedsim.sharing import reconstruct, share
from smpc_fedsim.simnet import Network

pytestmark = pytest.mark.slow
CFG = FixedPointConfig()


def record(n: int, ok: bool, detail: str, seconds: float, budget: float | None = None):
    within = budget is None or seconds < budget
    limit = f" (budget {budget:.0f}s)" if budget is not None else ""
    line = f"criterion {n}: {'PASS' if ok and within else 'FAIL'} {detail}; {seconds:.1f}s{limit}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert within, line


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def _train(out_dir, *flags):
    cfg = out_dir.with_suffix(".json")
    cfg.write_text(json.dumps({"out_dir": str(out_dir)}))
    with Timer() as t:
        code = main(["train", "--config", str(cfg), *flags])
    assert code == EXIT_OK
    return t.seconds


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Default training run (4 hospitals, 15 rounds, seed 7) and its plain-aggregation twin."""
    root = tmp_path_factory.mktemp("acceptance")
    secs = _train(root / "secure")
    plain_secs = _train(root / "plain", "--plain-aggregation")
    return {"root": root, "seconds": secs, "plain_seconds": plain_secs}


@pytest.fixture(scope="session")
def inference(trained):
    """Encrypted inference of the first 100 validation samples, batches of 20."""
    shared = load_shared_model(trained["root"] / "secure")
    _, val = load_data(DataConfig())
    X, y = val.X[:100], val.y[:100]
    net = Network("6g")
    preds, sessions = [], []
    with Timer() as t:
        for start in range(0, 100, 20):
            ids = list(range(start, start + 20))
            s = f"acc_{start}"
            preds.append(run_inference(shared, X[ids], ids, seed=11, net=net, session=s).predictions)
            sessions.append((s, len(ids)))
    return {"shared": shared, "X": X, "y": y, "pred": np.concatenate(preds), "net": net,
            "sessions": sessions, "seconds": t.seconds}


def test_criterion_1_secret_sharing():
    rng = np.random.default_rng(101)
    ring = Ring(64)
    failures = checks = 0
    with Timer() as t:
        for n in (2, 3, 5):
            secrets = ring.random(rng, (10_000,))
            got = reconstruct(share(secrets, n, rng, ring))
            failures += int(np.count_nonzero(got != secrets))
            checks += len(secrets)
        # u + s = sum(m_i) mod Q on 500 pairs, against Python integers
        for _ in range(500):
            h = int(rng.integers(2, 9))
            m = ring.random(rng, (h,))
            s0, s1 = share(m, 2, rng, ring)
            u = sum(int(v) for v in s0.values) % 2**64
            s = sum(int(v) for v in s1.values) % 2**64
            failures += int((u + s) % 2**64 != sum(int(v) for v in m) % 2**64)
            checks += 1
    record(1, failures == 0, f"{checks} checks, {failures} failures", t.seconds, 5)


def test_criterion_2_fss_comparison():
    with Timer() as t:
        results = [fss_exhaustive(8, seed=2), fss_exhaustive(10, seed=2), fss_spot(32, seed=2)]
    ok = all(r.passed for r in results)
    detail = ", ".join(f"{r.suite} {r.checks - r.failures}/{r.checks}" for r in results)
    record(2, ok, detail, t.seconds, 60)


def test_criterion_3_beaver():
    with Timer() as t:
        res = beaver_sweep(seed=3, pairs=10_000)
        # ring-exact identity on a fresh batch of generated triples as well
        triples = gen_beaver(100, (100,), np.random.default_rng(3), CFG.ring)
        bad = 0
        for tr in triples:
            a, b, c = reconstruct(tr.a), reconstruct(tr.b), reconstruct(tr.c)
            bad += int(np.count_nonzero(c != a * b))
    record(3, res.passed and bad == 0, f"{res.detail}; {100 * 100} extra triple identities, {bad} bad",
           t.seconds, 10)


def test_criterion_4_aggregation(trained):
    with Timer() as t:
        res = aggregation_exactness(seed=4, cases=((3, 1_000), (4, 10_000), (6, 50_000), (8, 100_000)))
    root = trained["root"]

    def columns(d):
        rows = [r for r in read_csv(d / "metrics.csv") if r["hospital_id"] == "global"]
        return [(r["round"], r["split"], r["accuracy"]) for r in rows]

    sec, plain = columns(root / "secure"), columns(root / "plain")
    paired = sec == plain and len(sec) == 30
    secs = t.seconds + trained["seconds"] + trained["plain_seconds"]
    record(4, res.passed and paired,
           f"{res.detail} over {res.checks} elements; paired accuracy columns identical: {paired}", secs, 120)


def test_criterion_5_fl_accuracy(trained):
    summary = json.loads((trained["root"] / "secure" / "summary.json").read_text())
    final, first = summary["final_validation_accuracy"], summary["first_validation_accuracy"]
    ok = final >= 0.90 and first >= 0.6 * final and summary["rounds_completed"] == 15
    record(5, ok, f"final validation {final:.4f}, round-1 {first:.4f} (ratio {first / final:.3f})",
           trained["seconds"], 600)


def test_criterion_6_inference_equivalence(inference):
    plain = decrypt_model(inference["shared"])
    X, pred = inference["X"], inference["pred"]
    fixed = fixedpoint_forward(plain, X, CFG)
    top2 = np.sort(fixed, axis=1)[:, -2:]
    gap = top2[:, 1] - top2[:, 0]
    budget = error_budget_lsb(plain)[-1]
    clear = gap > 2 * budget
    fixed_match = int(np.count_nonzero(pred[clear] == argmax_lowest(fixed)[clear]))
    float_match = int(np.count_nonzero(pred == argmax_lowest(forward(plain, X))))

    # batch-size invariance: the same 30 samples in batches of 5, 15 and 30
    shared, net = inference["shared"], Network()
    with Timer() as t:
        regrouped = {}
        for b in (5, 15, 30):
            out = []
            for start in range(0, 30, b):
                ids = list(range(start, start + b))
                out.append(run_inference(shared, X[ids], ids, seed=11, net=net, session=f"inv{b}_{start}").predictions)
            regrouped[b] = np.concatenate(out)
    invariant = all(np.array_equal(v, pred[:30]) for v in regrouped.values())
    ok = fixed_match == int(clear.sum()) and float_match >= 98 and invariant
    record(6, ok,
           f"fixed-point agreement {fixed_match}/{int(clear.sum())} with gap > 2x{budget:.0f} LSB, "
           f"float agreement {float_match}/100, accuracy {np.mean(pred == inference['y']):.2f}, "
           f"batch invariant {invariant}", inference["seconds"] + t.seconds, 600)


def test_criterion_7_timing_shape(trained):
    shared = load_shared_model(trained["root"] / "secure")
    X = blob_dataset(30, 4, seed=77).X
    times = []
    with Timer() as t:
        for b in (5, 10, 15, 20, 30):
            net = Network("6g")
            times.append(run_inference(shared, X[:b], list(range(b)), seed=1, net=net, session=f"b{b}").sim_time)
        slow = run_inference(shared, X[:5], list(range(5)), 1, Network("6g", compute_speed=1e9)).sim_time
        fast = run_inference(shared, X[:5], list(range(5)), 1, Network("6g", compute_speed=2e9)).sim_time
    _, _, r2 = linear_fit([5, 10, 15, 20, 30], times)
    ratio = fast / slow
    ok = r2 >= 0.95 and abs(ratio - 0.5) <= 0.1
    record(7, ok, f"R^2 {r2:.4f}, compute-speed x2 time ratio {ratio:.3f}", t.seconds, 300)


def test_criterion_8_privacy_audit(inference, trained):
    with Timer() as t:
        counts = [audit_transcript(inference["net"].transcript, s, b) for s, b in inference["sessions"]]
        # training transcript: hospitals only send fresh shares; parties only reveal the aggregate
        lines = (trained["root"] / "secure" / "transcript.txt").read_text().splitlines()
        tags = {json.loads(line)["tag"] for line in lines[1:]}
        train_ok = tags == {"share:input", "reveal:global"}

        ring = Ring(8)
        rng = np.random.default_rng(8)
        secret = np.full(10_000, 173, dtype=np.uint64)
        pvals = []
        for n in (2, 3):
            shares = share(secret, n, rng, ring)
            pvals += [chi2_uniform_pvalue(s.values, 256) for s in shares[:-1]]
    opened = sum(sum(c.values()) for c in counts)
    ok = train_ok and min(pvals) > 0.01
    record(8, ok, f"{opened} opened messages over {len(counts)} sessions all masked or output; "
                  f"training tags {sorted(tags)}; min chi-square p {min(pvals):.3f}", t.seconds, 60)


def test_criterion_9_determinism(trained, tmp_path):
    root = trained["root"]
    with Timer() as t:
        _train(tmp_path / "again")
        same_train = all((root / "secure" / f).read_bytes() == (tmp_path / "again" / f).read_bytes()
                         for f in ("metrics.csv", "metrics.dat", "transcript.txt"))
        digests = [json.loads((d / "summary.json").read_text())["transcript_sha256"]
                   for d in (root / "secure", tmp_path / "again")]

        infer_csv, infer_hash = [], []
        for name in ("i1", "i2"):
            cfg = tmp_path / f"{name}.json"
            cfg.write_text(json.dumps({"model_dir": str(root / "secure"), "samples": 10,
                                       "batch_sizes": [5, 10], "out_dir": str(tmp_path / name)}))
            assert main(["infer", "--config", str(cfg)]) == EXIT_OK
            infer_csv.append((tmp_path / name / "infer.csv").read_bytes()
                             + (tmp_path / name / "predictions.csv").read_bytes())
            infer_hash.append(json.loads((tmp_path / name / "summary.json").read_text())["transcript_sha256"])

        selftest = []
        for name in ("s1", "s2"):
            cfg = tmp_path / f"{name}.json"
            cfg.write_text(json.dumps({"out_dir": str(tmp_path / name)}))
            assert main(["selftest", "--config", str(cfg)]) == EXIT_OK
            selftest.append((tmp_path / name / "selftest.csv").read_bytes())
    ok = (same_train and digests[0] == digests[1] and infer_csv[0] == infer_csv[1]
          and infer_hash[0] == infer_hash[1] and selftest[0] == selftest[1])
    record(9, ok, f"train csv/transcript identical {same_train}, train hash {digests[0][:12]}, "
                  f"infer hash {infer_hash[0][:12]} x2, selftest csv identical {selftest[0] == selftest[1]}",
           t.seconds)
