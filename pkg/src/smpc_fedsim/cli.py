"""Command-line experiment runner.

Verbs: ``train`` (federated training with secret-shared aggregation),
``infer`` (encrypted inference over several batch sizes), ``selftest``,
``gen-randomness`` and ``print-config``.  Every run is driven by one JSON
config; flags given on the command line override it.

Exit codes: 0 success, 2 config error, 3 protocol abort, 4 self-test failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import report
from .binio import FormatError
from .config import ConfigError, DataConfig, config_dict, dump_config, load_config, validate
from .data import Dataset, blob_dataset, load_image_dir, partition
from .dealer import gen_beaver, gen_comparison_key, save_randomness
from .fedavg import HospitalState, TrainingConfig, fl_run
from .nn import argmax_lowest, fixedpoint_forward, forward, reference_model
from .ring_fixed import FixedPointConfig
from .secure_nn import AuditError, audit_transcript, decrypt_model, encrypt_model, load_model, merge_views, \
    run_inference, save_model
from .selftest import SELFTEST_COLUMNS, run_all
from .simnet import Network, ProtocolAbort

log = logging.getLogger("smpc_fedsim")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_SELFTEST = 0, 2, 3, 4
PARTY_FILES = ("model.p0.bin", "model.p1.bin")


class StartupError(Exception):
    """Missing or unreadable inputs detected before any protocol runs."""


def load_data(dc: DataConfig) -> tuple[Dataset, Dataset]:
    """(train, validation) from a PGM directory or the synthetic generator."""
    if dc.root is not None:
        if not Path(dc.root).is_dir():
            raise StartupError(f"dataset root {dc.root} does not exist")
        ds = load_image_dir(dc.root)
        idx = np.random.default_rng(dc.seed).permutation(len(ds))
        n_test = max(1, int(round(dc.test_fraction * len(ds))))
        return ds.subset(np.sort(idx[n_test:])), ds.subset(np.sort(idx[:n_test]))
    ds = blob_dataset(dc.train_samples + dc.test_samples, dc.num_classes, dc.seed,
                      noise=dc.noise, jitter=dc.jitter)
    n = dc.train_samples
    return ds.subset(np.arange(n)), ds.subset(np.arange(n, len(ds)))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- train ----------------------------------------------------------------------

def cmd_train(cfg) -> int:
    out = report.ensure_dir(cfg.out_dir)
    fp = FixedPointConfig(cfg.k, cfg.f)
    train, val = load_data(cfg.data)
    if len(train) < cfg.hospitals:
        raise StartupError(f"{len(train)} training samples cannot feed {cfg.hospitals} hospitals")
    init = reference_model(train.num_classes, np.random.default_rng(cfg.seed), train.X.shape[1:])
    shards = partition(train, cfg.hospitals, cfg.seed)
    hospitals = [HospitalState(i, shards[i], init.copy()) for i in range(cfg.hospitals)]
    tc = TrainingConfig(cfg.rounds, cfg.local_epochs, cfg.lr, cfg.batch_size, cfg.seed, 2, cfg.weighted)
    net = Network(cfg.link, compute_speed=cfg.compute_speed, fail_after=cfg.fail_after_messages)

    t0 = time.perf_counter()
    result = fl_run(hospitals, tc, net, fp, val, plain_aggregation=cfg.plain_aggregation)
    host_s = time.perf_counter() - t0

    report.write_csv(out / "metrics.csv", result.rows, report.TRAIN_COLUMNS)
    rounds = sorted({r["round"] for r in result.rows if r["hospital_id"] == "global"})
    by = {(r["round"], r["split"]): r for r in result.rows if r["hospital_id"] == "global"}
    report.write_dat(
        out / "metrics.dat",
        ["round", "train_accuracy", "validation_accuracy", "train_loss", "validation_loss", "bytes_sent"],
        [[r, by[r, "train"]["accuracy"], by[r, "validation"]["accuracy"], by[r, "train"]["loss"],
          by[r, "validation"]["loss"], by[r, "train"]["bytes_sent"]] for r in rounds],
    )
    report.plot_training(result.rows, out / "accuracy.png")
    net.transcript.write(out / "transcript.txt")

    summary = {
        "command": "train",
        "rounds_completed": len(rounds),
        "aborted": result.aborted,
        "transcript_sha256": net.transcript.digest(),
        "bytes": net.transcript.total_bytes,
        "config": config_dict(cfg),
    }
    if result.global_model is not None:
        save_model(out / "model_plain.bin", result.global_model, fp)
        shared = result.shared_global
        if shared is None:
            # plain or single-hospital aggregation: share the final model here
            shared = encrypt_model(result.global_model, fp, np.random.default_rng([cfg.seed, 99]))
        for p, name in enumerate(PARTY_FILES):
            save_model(out / name, shared, fp, party=p)
        summary["final_validation_accuracy"] = by[rounds[-1], "validation"]["accuracy"]
        summary["first_validation_accuracy"] = by[rounds[0], "validation"]["accuracy"]
    _write_json(out / "summary.json", summary)
    _write_json(out / "host_timing.json", {"host_seconds": host_s})

    for r in rounds:
        print(f"round={r} train_accuracy={by[r, 'train']['accuracy']:.6f} "
              f"validation_accuracy={by[r, 'validation']['accuracy']:.6f} bytes={by[r, 'train']['bytes_sent']}")
    print(f"transcript_sha256={summary['transcript_sha256']}")
    if result.aborted:
        print(f"aborted: {result.aborted}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


# -- infer ----------------------------------------------------------------------

def load_shared_model(model_dir):
    paths = [Path(model_dir) / name for name in PARTY_FILES]
    for p in paths:
        if not p.is_file():
            raise StartupError(f"missing party model file: {p}")
    views = [load_model(p) for p in paths]
    if any(v.mode != "shared" for v in views):
        raise StartupError(f"{model_dir}: party files must hold shared models")
    return merge_views(views)


def cmd_infer(cfg) -> int:
    shared = load_shared_model(cfg.model_dir)
    fp = shared.cfg
    out = report.ensure_dir(cfg.out_dir)
    _, val = load_data(cfg.data)
    S = min(cfg.samples, len(val))
    X, y = val.X[:S], val.y[:S]
    # the shared model decodes to the fixed-point weights; both oracles use them
    plain = decrypt_model(shared)
    fixed_pred = argmax_lowest(fixedpoint_forward(plain, X, fp))
    float_pred = argmax_lowest(forward(plain, X))

    net = Network(cfg.link, compute_speed=cfg.compute_speed, fail_after=cfg.fail_after_messages)
    rows, pred_rows, host = [], [], {}
    for b in cfg.batch_sizes:
        preds, times, nbytes, msgs = [], [], [], []
        t0 = time.perf_counter()
        for start in range(0, S, b):
            ids = list(range(start, min(start + b, S)))
            session = f"infer_b{b}_{start}"
            res = run_inference(shared, X[ids], ids, cfg.seed, net, session)
            audit_transcript(net.transcript, session, len(ids), fp.ring.nbytes)
            preds.append(res.predictions)
            times.append(res.sim_time)
            nbytes.append(res.bytes)
            msgs.append(res.messages)
        host[str(b)] = time.perf_counter() - t0
        pred = np.concatenate(preds)
        # per-batch cost of a full batch of b images
        rows.append({
            "batch_size": b,
            "accuracy": float(np.mean(pred == y)),
            "fixed_point_agreement": float(np.mean(pred == fixed_pred)),
            "float_agreement": float(np.mean(pred == float_pred)),
            "sim_time_s": float(times[0]),
            "bytes": int(nbytes[0]),
            "messages": int(msgs[0]),
        })
        pred_rows += [
            {"batch_size": b, "sample_id": i, "label": int(y[i]), "prediction": int(pred[i]),
             "fixed_point": int(fixed_pred[i]), "float": int(float_pred[i])}
            for i in range(S)
        ]
        log.info("batch %d: accuracy %.4f, %.4fs simulated", b, rows[-1]["accuracy"], rows[-1]["sim_time_s"])

    report.write_csv(out / "infer.csv", rows, report.INFER_COLUMNS)
    report.write_csv(out / "predictions.csv", pred_rows,
                     ["batch_size", "sample_id", "label", "prediction", "fixed_point", "float"])
    report.write_dat(out / "infer.dat", report.INFER_COLUMNS, [[r[c] for c in report.INFER_COLUMNS] for r in rows])
    report.plot_inference(rows, out / "infer_time.png", out / "infer_accuracy.png")
    net.transcript.write(out / "transcript.txt")
    slope, intercept, r2 = (report.linear_fit([r["batch_size"] for r in rows], [r["sim_time_s"] for r in rows])
                            if len(rows) > 1 else (float("nan"),) * 3)
    seen: dict = {}
    for r in pred_rows:
        seen.setdefault(r["sample_id"], set()).add(r["prediction"])
    invariant = all(len(v) == 1 for v in seen.values())
    summary = {
        "command": "infer",
        "samples": S,
        "transcript_sha256": net.transcript.digest(),
        "time_fit": {"slope_s_per_image": slope, "intercept_s": intercept, "r2": r2},
        "batch_invariant": invariant,
        "config": config_dict(cfg),
    }
    _write_json(out / "summary.json", summary)
    _write_json(out / "host_timing.json", {"host_seconds_per_batch_size": host})

    for r in rows:
        print(",".join(f"{c}={report.fmt(r[c])}" for c in report.INFER_COLUMNS))
    print(f"time_fit_r2={r2:.6f} batch_invariant={int(invariant)}")
    print(f"transcript_sha256={summary['transcript_sha256']}")
    return EXIT_OK


# -- selftest / gen-randomness ------------------------------------------------------

def cmd_selftest(cfg) -> int:
    if cfg.randomness is not None and not Path(cfg.randomness).is_file():
        raise StartupError(f"randomness file {cfg.randomness} does not exist")
    out = report.ensure_dir(cfg.out_dir)
    results = run_all(cfg.seed, cfg.randomness)
    report.write_csv(out / "selftest.csv", [r.row() for r in results], SELFTEST_COLUMNS)
    for r in results:
        print(f"{r.suite},{'PASS' if r.passed else 'FAIL'},{r.checks},{r.failures},{r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


def cmd_gen_randomness(cfg) -> int:
    fp = FixedPointConfig(cfg.k, cfg.f)
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(cfg.shape)
    items = gen_beaver(cfg.triples, shape, rng, fp.ring, prefix="t")
    items += [gen_comparison_key(rng, fp, shape, id=f"c{i}") for i in range(cfg.comparison_keys)]
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    save_randomness(cfg.out, fp, items)
    print(f"wrote {cfg.out}: {cfg.triples} triples, {cfg.comparison_keys} comparison keys, shape {list(shape)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "selftest": cmd_selftest,
    "gen-randomness": cmd_gen_randomness,
}


# -- argument handling ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--link", choices=["6g", "4g"], help="link preset")
    common.add_argument("--plain-aggregation", action="store_true",
                        help="train: average in the clear (baseline)")
    common.add_argument("--print-config", action="store_true",
                        help="print the effective config as JSON and exit")
    parser = argparse.ArgumentParser(prog="smpc-fedsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        sub.add_parser(verb, parents=[common])
    pc = sub.add_parser("print-config", parents=[common], help="print default config for a command")
    pc.add_argument("command", choices=list(COMMANDS))
    return parser


def effective_config(verb: str, args):
    cfg = load_config(verb, args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.link is not None:
        if not hasattr(cfg, "link"):
            raise ConfigError(f"--link does not apply to {verb}")
        cfg.link = args.link
    if args.plain_aggregation:
        if not hasattr(cfg, "plain_aggregation"):
            raise ConfigError(f"--plain-aggregation does not apply to {verb}")
        cfg.plain_aggregation = True
    return validate(cfg)


def main(argv=None) -> int:
    level = os.environ.get("SMPC_FEDSIM_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        print(f"error: SMPC_FEDSIM_LOG={level!r} is not a log level", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    verb = args.command if args.verb == "print-config" else args.verb
    try:
        cfg = effective_config(verb, args)
        if args.verb == "print-config" or args.print_config:
            print(dump_config(cfg))
            return EXIT_OK
        return COMMANDS[verb](cfg)
    except (ConfigError, StartupError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolAbort, AuditError) as exc:
        print(f"protocol abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
