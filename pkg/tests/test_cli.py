import json

import numpy as np
import pytest

from smpc_fedsim.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, EXIT_SELFTEST, main
from smpc_fedsim.config import ConfigError, TrainConfig, load_config, validate
from smpc_fedsim.dealer import load_randomness, save_randomness
from smpc_fedsim.sharing import ShareVector

DATA = {"train_samples": 120, "test_samples": 40, "num_classes": 3}


def _write(path, obj):
    path.write_text(json.dumps(obj, indent=2))
    return str(path)


def _train_cfg(tmp_path, name="train", **extra):
    cfg = {"data": DATA, "hospitals": 2, "rounds": 2, "out_dir": str(tmp_path / name), **extra}
    return _write(tmp_path / f"{name}.json", cfg)


def _infer_cfg(tmp_path, model_dir, name="infer", **extra):
    cfg = {"data": DATA, "model_dir": str(model_dir), "batch_sizes": [2, 3], "samples": 6,
           "out_dir": str(tmp_path / name), **extra}
    return _write(tmp_path / f"{name}.json", cfg)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert main(["train", "--config", _train_cfg(tmp)]) == EXIT_OK
    return tmp


def test_train_outputs(trained):
    out = trained / "train"
    for name in ("metrics.csv", "metrics.dat", "accuracy.png", "transcript.txt", "summary.json",
                 "model_plain.bin", "model.p0.bin", "model.p1.bin"):
        assert (out / name).is_file(), name
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "round,hospital_id,split,accuracy,loss,bytes_sent,wall_ms"
    assert len(lines) == 1 + 2 * (2 + 2)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rounds_completed"] == 2 and summary["aborted"] is None


def test_train_is_deterministic(trained, tmp_path):
    assert main(["train", "--config", _train_cfg(tmp_path)]) == EXIT_OK
    a, b = trained / "train", tmp_path / "train"
    for name in ("metrics.csv", "metrics.dat", "transcript.txt", "model.p0.bin", "model.p1.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    sa, sb = (json.loads((d / "summary.json").read_text()) for d in (a, b))
    assert sa["transcript_sha256"] == sb["transcript_sha256"]


def test_infer_outputs_and_determinism(trained, capsys):
    paths = []
    for name in ("inf1", "inf2"):
        assert main(["infer", "--config", _infer_cfg(trained, trained / "train", name)]) == EXIT_OK
        paths.append(trained / name)
    for name in ("infer.csv", "predictions.csv", "infer.dat", "transcript.txt"):
        assert (paths[0] / name).read_bytes() == (paths[1] / name).read_bytes(), name
    rows = (paths[0] / "infer.csv").read_text().splitlines()
    assert len(rows) == 3
    summary = json.loads((paths[0] / "summary.json").read_text())
    assert summary["batch_invariant"] is True
    assert "time_fit_r2=" in capsys.readouterr().out


def test_missing_party_file_named(trained, tmp_path, capsys):
    (tmp_path / "m").mkdir()
    (tmp_path / "m" / "model.p0.bin").write_bytes((trained / "train" / "model.p0.bin").read_bytes())
    assert main(["infer", "--config", _infer_cfg(tmp_path, tmp_path / "m")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "missing party model file" in err and str(tmp_path / "m" / "model.p1.bin") in err


def test_protocol_abort_exit_code(tmp_path, capsys):
    assert main(["train", "--config", _train_cfg(tmp_path, fail_after_messages=10)]) == EXIT_ABORT
    assert "round 2" in capsys.readouterr().err
    summary = json.loads((tmp_path / "train" / "summary.json").read_text())
    assert summary["rounds_completed"] == 1


def test_infer_abort_exit_code(trained, tmp_path):
    cfg = _infer_cfg(tmp_path, trained / "train", fail_after_messages=3)
    assert main(["infer", "--config", cfg]) == EXIT_ABORT


def test_unknown_key_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "rounds": 3,\n  "hospitalz": 4\n}\n')
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "line 3" in err and "hospitalz" in err


def test_type_and_syntax_errors_report_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "data": {\n    "noise": "high"\n  }\n}\n')
    with pytest.raises(ConfigError, match=r"line 3: 'data.noise' should be a number"):
        load_config("train", str(p))
    p.write_text('{\n  "rounds": 3,\n}\n')
    with pytest.raises(ConfigError, match="line 3 column 1"):
        load_config("train", str(p))
    p.write_text('{"fail_after_messages": "soon"}')
    with pytest.raises(ConfigError, match="an integer or null"):
        load_config("train", str(p))


def test_semantic_validation():
    for bad in (dict(hospitals=0), dict(link="5g"), dict(k=60), dict(f=62), dict(compute_speed=0.0)):
        with pytest.raises(ConfigError):
            validate(TrainConfig(**bad))


def test_print_config(capsys):
    assert main(["print-config", "train"]) == EXIT_OK
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["hospitals"] == 4 and cfg["rounds"] == 15 and cfg["seed"] == 7 and cfg["link"] == "6g"
    assert main(["infer", "--print-config", "--link", "4g", "--seed", "2"]) == EXIT_OK
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["link"] == "4g" and cfg["seed"] == 2 and cfg["batch_sizes"] == [5, 10, 15, 20, 30]


def test_flag_not_applicable(capsys):
    assert main(["selftest", "--link", "4g"]) == EXIT_CONFIG
    assert "--link does not apply" in capsys.readouterr().err


def test_bad_log_level(monkeypatch):
    monkeypatch.setenv("SMPC_FEDSIM_LOG", "chatty")
    assert main(["print-config", "train"]) == EXIT_CONFIG


def test_selftest_pass_and_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        cfg = _write(tmp_path / f"{name}.json", {"out_dir": str(tmp_path / name)})
        assert main(["selftest", "--config", cfg]) == EXIT_OK
        outs.append((tmp_path / name / "selftest.csv").read_bytes())
    assert outs[0] == outs[1]
    lines = capsys.readouterr().out.splitlines()
    assert all(",PASS," in line for line in lines)


def test_gen_randomness_and_corrupted_triple(tmp_path, capsys):
    rnd = tmp_path / "r.bin"
    cfg = _write(tmp_path / "g.json", {"out": str(rnd), "triples": 4, "comparison_keys": 1, "shape": [8]})
    assert main(["gen-randomness", "--config", cfg]) == EXIT_OK
    st = _write(tmp_path / "s.json", {"out_dir": str(tmp_path / "st"), "randomness": str(rnd)})
    assert main(["selftest", "--config", st]) == EXIT_OK
    capsys.readouterr()

    fp, items = load_randomness(rnd)
    t = items[2]
    t.c = (ShareVector(0, t.c[0].values ^ np.uint64(1 << 20), fp.ring), t.c[1])
    save_randomness(rnd, fp, items)
    assert main(["selftest", "--config", st]) == EXIT_SELFTEST
    out = capsys.readouterr().out
    beaver = [line for line in out.splitlines() if line.startswith("beaver")]
    assert beaver and ",FAIL," in beaver[0] and "identity violation" in beaver[0]


def test_missing_randomness_file(tmp_path):
    st = _write(tmp_path / "s.json", {"randomness": str(tmp_path / "nope.bin")})
    assert main(["selftest", "--config", st]) == EXIT_CONFIG


def test_dataset_root_loading(tmp_path):
    from smpc_fedsim.data import blob_dataset, write_image_dir
    write_image_dir(tmp_path / "imgs", blob_dataset(60, 2, seed=3))
    cfg = _write(tmp_path / "t.json", {"data": {"root": str(tmp_path / "imgs")}, "hospitals": 2, "rounds": 1,
                                       "out_dir": str(tmp_path / "o")})
    assert main(["train", "--config", cfg]) == EXIT_OK
    missing = _write(tmp_path / "m.json", {"data": {"root": str(tmp_path / "none")}})
    assert main(["train", "--config", missing]) == EXIT_CONFIG
