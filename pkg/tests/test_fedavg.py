import numpy as np
import pytest

from conftest import chi2_uniform_pvalue
from smpc_fedsim.data import blob_dataset, partition
from smpc_fedsim.fedavg import (
    HospitalState, TrainingConfig, fedavg_fixed, fedavg_plain, fl_run, local_train, reveal_to_hospitals,
    secure_aggregate,
)
from smpc_fedsim.nn import Layer, ModelParams, ShapeError, reference_model
from smpc_fedsim.ring_fixed import FixedPointConfig
from smpc_fedsim.selftest import aggregation_exactness
from smpc_fedsim.simnet import Network

CFG = FixedPointConfig()


def _const_model(v, n=3):
    return ModelParams([Layer("dense", np.full((n, 1), float(v)), np.array([float(v)]))], (n,))


def test_fedavg_plain_examples():
    avg = fedavg_plain([_const_model(v) for v in (2, 4, 6)])
    assert np.allclose(avg.flat(), 4.0)
    w = fedavg_plain([_const_model(0), _const_model(3)], weights=[2, 1])
    assert np.allclose(w.flat(), 1.0)
    with pytest.raises(ValueError):
        fedavg_plain([])


def test_secure_aggregate_examples():
    agg = secure_aggregate([_const_model(v) for v in (2, 4, 6)], Network(), CFG, seed=1)
    assert np.max(np.abs(agg.reveal().flat() - 4.0)) <= 2.0 ** -15
    same = secure_aggregate([_const_model(-1.3)] * 4, Network(), CFG, seed=2)
    assert np.max(np.abs(same.reveal().flat() + 1.3)) <= 2 * 2.0 ** -16


def test_secure_matches_plain_within_two_lsb():
    res = aggregation_exactness(seed=4, cases=((3, 1000), (5, 5000)))
    assert res.passed, res.detail


@pytest.mark.parametrize("weights", [None, [10, 30, 25]])
def test_reveal_equals_plaintext_fixed_point_twin(weights):
    rng = np.random.default_rng(7)
    models = [reference_model(3, rng) for _ in range(3)]
    agg = secure_aggregate(models, Network(), CFG, seed=7, weights=weights)
    assert np.array_equal(agg.reveal().flat(), fedavg_fixed(models, CFG, weights).flat())
    assert np.max(np.abs(agg.reveal().flat() - fedavg_plain(models, weights).flat())) <= 0.05 * 2.0 ** -16


def test_weighted_secure_aggregate():
    agg = secure_aggregate([_const_model(0), _const_model(3)], Network(), CFG, seed=3, weights=[2, 1])
    assert np.max(np.abs(agg.reveal().flat() - 1.0)) <= 2.0 ** -15


def test_party_share_of_aggregate_looks_uniform():
    m = ModelParams([Layer("dense", np.full((9999, 1), 0.25), np.zeros(1))], (9999,))
    agg = secure_aggregate([m, m, m], Network(), CFG, seed=5)
    assert chi2_uniform_pvalue(agg.shares[0].values & np.uint64(0xFF), 256) > 0.01


def test_shared_model_layers_match_reveal():
    rng = np.random.default_rng(0)
    models = [reference_model(3, rng) for _ in range(2)]
    agg = secure_aggregate(models, Network(), CFG, seed=6)
    from smpc_fedsim.secure_nn import decrypt_model
    enc = decrypt_model(agg.shared_model()).flat()
    assert np.max(np.abs(enc - agg.reveal().flat())) <= 2 * 2.0 ** -16
    net = Network()
    seen = reveal_to_hospitals(agg, 2, net, session="rv")
    assert np.array_equal(seen.flat(), agg.reveal().flat())
    assert net.transcript.session_bytes("rv") == 2 * 2 * models[0].num_params * 8


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        secure_aggregate([_const_model(1, 3), _const_model(1, 4)], Network(), CFG, seed=0)
    with pytest.raises(ValueError, match="at least two"):
        secure_aggregate([_const_model(1)], Network(), CFG, seed=0)


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(rounds=0)
    with pytest.raises(ValueError):
        TrainingConfig(lr=-1)
    with pytest.raises(ValueError, match="exactly two"):
        TrainingConfig(parties=3)


def _hospitals(n, seed=0, samples=160, classes=3):
    ds = blob_dataset(samples, classes, seed=seed)
    init = reference_model(classes, np.random.default_rng(seed))
    return [HospitalState(i, part, init.copy()) for i, part in enumerate(partition(ds, n, seed))]


def test_single_hospital_equals_local_training():
    cfg = TrainingConfig(rounds=2, seed=3)
    hs = _hospitals(1)
    start = hs[0].model.copy()
    val = blob_dataset(30, 3, seed=9)
    res = fl_run(hs, cfg, Network(), CFG, val)
    h = HospitalState(0, hs[0].data, start)
    for r in (1, 2):
        h.model, _ = local_train(h, cfg, r)
    assert np.array_equal(res.global_model.flat(), h.model.flat())
    assert res.rows[-1]["bytes_sent"] == 0


def test_secure_and_plain_aggregation_give_same_accuracy():
    cfg = TrainingConfig(rounds=3, seed=1)
    val = blob_dataset(60, 3, seed=8)
    sec = fl_run(_hospitals(3), cfg, Network(), CFG, val)
    plain = fl_run(_hospitals(3), cfg, Network(), CFG, val, plain_aggregation=True)
    assert sec.accuracies("validation") == plain.accuracies("validation")
    assert sec.accuracies("train") == plain.accuracies("train")
    assert np.array_equal(sec.global_model.flat(), plain.global_model.flat())


def test_metric_rows_and_bytes():
    cfg = TrainingConfig(rounds=2, seed=2)
    hs = _hospitals(3)
    res = fl_run(hs, cfg, Network(), CFG, blob_dataset(30, 3, seed=1))
    assert len(res.rows) == 2 * (3 + 2)
    P = hs[0].model.num_params
    glob = [r for r in res.rows if r["hospital_id"] == "global"]
    # 3 hospitals x 2 parties shares in, 2 parties x 3 hospitals reveals out
    assert all(r["bytes_sent"] == 12 * P * 8 for r in glob)
    assert all(r["wall_ms"] > 0 for r in glob)
    assert {r["split"] for r in res.rows} == {"local_train", "train", "validation"}


def test_transport_failure_aborts_run():
    cfg = TrainingConfig(rounds=3, seed=2)
    res = fl_run(_hospitals(2), cfg, Network("6g", fail_after=10), CFG, blob_dataset(30, 3, seed=1))
    assert res.aborted and res.aborted.startswith("round 2:")
    assert res.accuracies("validation") and len(res.accuracies("validation")) == 1


def test_empty_hospital_rejected():
    h = _hospitals(2)[0]
    h.data = h.data.subset(np.array([], dtype=int))
    with pytest.raises(ValueError, match="empty"):
        local_train(h, TrainingConfig())
