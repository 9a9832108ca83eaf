import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from stokes_ae import anomaly
from stokes_ae.anomaly import score as score_oracle
from stokes_ae.cli import main
from stokes_ae.fitsio import continuum_normalize, export_scan_directory, read_archive, read_truth
from stokes_ae.nn import layers
from stokes_ae.synth import synth_map


def run(*args, **kw):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False, **kw)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """Two small training archives, a validation archive and a 5-epoch checkpoint."""
    d = tmp_path_factory.mktemp("cli")
    for name, seed in (("a", 1), ("b", 2), ("val", 3)):
        assert run("synth", "--out", d / f"{name}.spa", "--width", 12, "--height", 10, "--seed", seed).exit_code == 0
    t0 = time.monotonic()
    r = run("train", "--train", d / "a.spa", "--train", d / "b.spa", "--val", d / "val.spa",
            "--out-checkpoint", d / "m.spae", "--max-epochs", 5, "--seed", 3)
    assert r.exit_code == 0, r.output
    assert time.monotonic() - t0 < 60
    return d


def test_synth_is_deterministic(tmp_path):
    for k in (1, 2):
        assert run("synth", "--out", tmp_path / f"{k}.spa", "--width", 64, "--height", 64,
                   "--mode", "QT", "--seed", 7).exit_code == 0
    assert (tmp_path / "1.spa").read_bytes() == (tmp_path / "2.spa").read_bytes()


def test_synth_sidecar_and_fl_manifest(tmp_path):
    out = tmp_path / "m.spa"
    r = run("synth", "--out", out, "--width", 16, "--height", 8, "--anomalies", "7,3,three-lobed", "--mode", "FL")
    assert r.exit_code == 0
    truth = read_truth(f"{out}.truth.json")
    assert [(t["x"], t["y"], t["kind"]) for t in truth] == [(7, 3, "three-lobed")]
    man = json.loads((tmp_path / "m.spa.manifest.json").read_text())
    assert man["config"]["metadata"]["integration_time"] == 0.8
    assert man["subcommand"] == "synth" and man["seed"] == 0
    assert read_archive(out).metadata.integration_time == 0.8


@pytest.mark.parametrize("args", [
    ["--width", "0"],
    ["--mode", "XX"],
    ["--anomalies", "1,2"],
    ["--anomalies", "1,2,not-a-kind"],
    ["--sigma-ref", "-1"],
])
def test_synth_bad_args_exit_2(tmp_path, args):
    assert run("synth", "--out", tmp_path / "x.spa", *args).exit_code == 2


def test_synth_out_of_bounds_anomaly_exit_1(tmp_path):
    assert run("synth", "--out", tmp_path / "x.spa", "--width", 4, "--height", 4,
               "--anomalies", "9,9,broadened").exit_code == 1


def test_import_round_trip(tmp_path):
    m = synth_map(5, 3, "spot", seed=4).map
    export_scan_directory(m, tmp_path / "fits", "wave-slit-stokes", bitpix=-64)
    r = run("import", "--fits-dir", tmp_path / "fits", "--axis-convention", "wave-slit-stokes",
            "--out", tmp_path / "m.spa")
    assert r.exit_code == 0, r.output
    back = read_archive(tmp_path / "m.spa")
    i, v = continuum_normalize(m.i, m.v, m.grid)
    np.testing.assert_array_equal(back.i, i)
    np.testing.assert_array_equal(back.v, v)
    man = json.loads((tmp_path / "m.spa.manifest.json").read_text())
    assert len(man["inputs"]) == 5


def test_import_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("import", "--fits-dir", tmp_path / "empty", "--out", tmp_path / "x.spa").exit_code == 2
    mixed = tmp_path / "mixed"
    export_scan_directory(synth_map(2, 3, seed=1).map, mixed, prefix="a")
    export_scan_directory(synth_map(2, 4, seed=1).map, mixed, prefix="b")
    r = run("import", "--fits-dir", mixed, "--out", tmp_path / "x.spa")
    assert r.exit_code == 1 and "InconsistentShapes" in r.output


def test_train_outputs(tiny):
    rows = (tiny / "m.spae.history.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss,lr" and len(rows) == 6
    man = json.loads((tiny / "m.spae.manifest.json").read_text())
    assert man["seed"] == 3 and man["config"]["max_epochs"] == 5 and "threads" not in man["config"]
    assert set(man["inputs"]) == {str(tiny / n) for n in ("a.spa", "b.spa", "val.spa")}


def test_train_rerun_identical(tiny, tmp_path):
    r = run("train", "--train", tiny / "a.spa", "--train", tiny / "b.spa", "--val", tiny / "val.spa",
            "--out-checkpoint", tmp_path / "m.spae", "--max-epochs", 5, "--seed", 3, "--threads", 2)
    assert r.exit_code == 0
    assert (tmp_path / "m.spae").read_bytes() == (tiny / "m.spae").read_bytes()
    assert (tmp_path / "m.spae.history.csv").read_text() == (tiny / "m.spae.history.csv").read_text()


def test_train_usage_errors(tiny, tmp_path):
    assert run("train", "--train", tiny / "a.spa", "--out-checkpoint", tmp_path / "m.spae").exit_code == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"batch_sz": 4}))
    assert run("train", "--train", tiny / "a.spa", "--val", tiny / "val.spa", "--config", cfg,
               "--out-checkpoint", tmp_path / "m.spae").exit_code == 2


def test_train_numerical_fault_exit_1(tiny, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 1e300, "max_epochs": 3}))
    with np.errstate(all="ignore"):
        r = run("train", "--train", tiny / "a.spa", "--val", tiny / "val.spa", "--config", cfg,
                "--out-checkpoint", tmp_path / "m.spae")
    assert r.exit_code == 1 and "NumericalFault" in r.output


def test_detect_and_score(tiny, tmp_path):
    d = tmp_path / "rep"
    assert run("synth", "--out", tmp_path / "t.spa", "--width", 20, "--height", 10, "--seed", 9,
               "--anomalies", "4,4,three-lobed;15,2,broadened,0.8").exit_code == 0
    r = run("detect", "--map", tmp_path / "t.spa", "--checkpoint", tiny / "m.spae", "--out-dir", d, "--top-k", 5)
    assert r.exit_code == 0, r.output
    report = json.loads((d / "report.json").read_text())
    assert len(report["top_k"]) == 5 and report["h_pixel"] == [report["top_k"][0]["x"], report["top_k"][0]["y"]]
    assert (d / "heatmap_v.pgm").read_bytes().startswith(b"P5")
    assert json.loads((d / "manifest.json").read_text())["subcommand"] == "detect"
    r = run("score", "--report", d / "report.json", "--truth", tmp_path / "t.spa.truth.json")
    got = json.loads(r.output)
    want = score_oracle(report["top_k"], read_truth(tmp_path / "t.spa.truth.json"))
    assert got == want.to_dict()


def test_detect_with_perfect_stub(tiny, tmp_path, monkeypatch):
    monkeypatch.setattr(anomaly, "model_forward", lambda model, x, keep_cache=False: (x.copy(), None, None))
    r = run("detect", "--map", tiny / "val.spa", "--checkpoint", tiny / "m.spae", "--out-dir", tmp_path)
    assert r.exit_code == 0
    assert not np.loadtxt(tmp_path / "heatmap_v.csv", delimiter=",").any()
    assert not np.loadtxt(tmp_path / "heatmap_i.csv", delimiter=",").any()


def test_detect_bad_checkpoint_magic(tiny, tmp_path):
    bad = tmp_path / "bad.spae"
    bad.write_bytes(b"NOPE" + (tiny / "m.spae").read_bytes()[4:])
    r = run("detect", "--map", tiny / "val.spa", "--checkpoint", bad, "--out-dir", tmp_path / "o")
    assert r.exit_code == 1 and "BadMagic" in r.output


def test_score_examples(tmp_path):
    rep = tmp_path / "r.json"
    rep.write_text(json.dumps({"top_k": [{"x": 1, "y": 2}, {"x": 3, "y": 3}]}))
    truth = tmp_path / "t.json"
    truth.write_text(json.dumps({"anomalies": [{"x": 1, "y": 2, "kind": "broadened"}]}))
    assert json.loads(run("score", "--report", rep, "--truth", truth).output)["recall"] == 1.0
    truth.write_text(json.dumps({"anomalies": []}))
    s = json.loads(run("score", "--report", rep, "--truth", truth).output)
    assert s["recall"] == 1.0 and s["vacuous"] is True


def test_gradcheck_command(monkeypatch):
    r = run("gradcheck", "--seed", 1, "--per-layer", 16)
    assert r.exit_code == 0 and "PASS" in r.output
    assert run("gradcheck", "--h", 0).exit_code == 2
    real = layers.relu_backward
    monkeypatch.setattr(layers, "relu_backward", lambda x, g: real(x, g) * 1.01)
    r = run("gradcheck", "--seed", 1, "--per-layer", 16)
    assert r.exit_code == 1 and "FAIL" in r.output


def test_version():
    assert run("--version").exit_code == 0
