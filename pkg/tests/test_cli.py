import csv
import json

import numpy as np
import pytest

from polyrbf import __version__
from polyrbf.artifact import read_fit
from polyrbf.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, main
from polyrbf.gradients import read_scheme, write_scheme
from polyrbf.protocols import multishell_scheme
from polyrbf.volume import read_nifti


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--dims", "4", "4", "2", "--sigma-rel", "0.02", "--seed", "3",
                 "--out-dir", str(d)]) == EXIT_OK
    return d


def _fit_args(sim, out, *extra):
    return ["fit", "--dwi", str(sim / "dwi.nii"), "--bvals", str(sim / "dwi.bval"),
            "--bvecs", str(sim / "dwi.bvec"), "--out", str(out), *extra]


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0 and __version__ in capsys.readouterr().out


def test_simulate_outputs(sim):
    sch = read_scheme(sim / "dwi.bval", sim / "dwi.bvec")
    vol = read_nifti(sim / "dwi.nii", sch)
    assert vol.data.shape == (4, 4, 2, 288) and vol.data.dtype == np.float32
    side = json.loads((sim / "sidecar.json").read_text())
    assert side["spec"]["seed"] == 3


def test_fit_defaults_and_report(sim, tmp_path):
    assert main(_fit_args(sim, tmp_path / "a.fit")) == EXIT_OK
    fit, header = read_fit(tmp_path / "a.fit")
    assert (fit.cfg.N, fit.cfg.K) == (10, 4)
    rep = json.loads((tmp_path / "a.fit.json").read_text())
    assert rep["basis"]["N"] == 10 and rep["in_sample_log_mse"] < 0.1
    assert header["extra"]["grid"]["pixdim"][0] == 1.0


def test_fit_byte_identical_across_runs_and_threads(sim, tmp_path):
    main(_fit_args(sim, tmp_path / "a.fit"))
    main(_fit_args(sim, tmp_path / "b.fit", "--threads", "4"))
    assert (tmp_path / "a.fit").read_bytes() == (tmp_path / "b.fit").read_bytes()


def test_fit_auto_order(sim, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"K": "auto", "K_candidates": [1, 2], "folds": 3}))
    assert main(_fit_args(sim, tmp_path / "a.fit", "--config", str(cfg))) == EXIT_OK
    rep = json.loads((tmp_path / "a.fit.json").read_text())
    assert rep["order_selection"]["K"] in (1, 2)


def test_missing_file_exit_io(sim, tmp_path, capsys):
    args = _fit_args(sim, tmp_path / "a.fit")
    args[args.index("--bvecs") + 1] = str(tmp_path / "nope.bvec")
    assert main(args) == EXIT_IO
    assert "nope.bvec" in capsys.readouterr().err


def test_bad_config_exit_invalid(sim, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"N": 10, "Q": 1}))
    assert main(_fit_args(sim, tmp_path / "a.fit", "--config", str(cfg))) == EXIT_INVALID
    assert "Q" in capsys.readouterr().err
    cfg.write_text("{not json")
    assert main(_fit_args(sim, tmp_path / "a.fit", "--config", str(cfg))) == EXIT_INVALID
    assert main(_fit_args(sim, tmp_path / "a.fit", "--threads", "0")) == EXIT_INVALID


def test_predict_and_evaluate(sim, tmp_path):
    main(_fit_args(sim, tmp_path / "a.fit"))
    args = ["predict", "--fit", str(tmp_path / "a.fit"), "--bvals", str(sim / "dwi.bval"),
            "--bvecs", str(sim / "dwi.bvec"), "--out", str(tmp_path / "pred.nii"),
            "--report", str(tmp_path / "pred.json")]
    assert main(args) == EXIT_OK
    pred = read_nifti(tmp_path / "pred.nii")
    assert pred.data.shape == (4, 4, 2, 288) and pred.data.dtype == np.float32
    assert main(["evaluate", "--pred", str(tmp_path / "pred.nii"), "--truth",
                 str(sim / "truth.nii"), "--bvals", str(sim / "dwi.bval"), "--bvecs",
                 str(sim / "dwi.bvec"), "--out", str(tmp_path / "ev.json")]) == EXIT_OK
    ev = json.loads((tmp_path / "ev.json").read_text())
    assert ev["n_frames"] == 270 and 0 < ev["mse_log"] < 0.05


def test_predict_extrapolation_exit_invalid(sim, tmp_path):
    main(_fit_args(sim, tmp_path / "a.fit"))
    far = multishell_scheme((5000.0,), 10, 1)
    write_scheme(far, tmp_path / "far.bval", tmp_path / "far.bvec")
    args = ["predict", "--fit", str(tmp_path / "a.fit"), "--bvals", str(tmp_path / "far.bval"),
            "--bvecs", str(tmp_path / "far.bvec"), "--out", str(tmp_path / "p.nii")]
    assert main(args) == EXIT_INVALID
    with pytest.warns(UserWarning):
        assert main(args + ["--allow-extrapolation"]) == EXIT_OK


def test_harmonize_manifest(sim, tmp_path):
    manifest = {"datasets": [
        {"name": "a", "dwi": str(sim / "dwi.nii"), "bvals": str(sim / "dwi.bval"),
         "bvecs": str(sim / "dwi.bvec"), "batch": "x"},
        {"name": "b", "dwi": str(sim / "dwi.nii"), "bvals": str(sim / "dwi.bval"),
         "bvecs": str(sim / "dwi.bvec"), "batch": "y"}],
        "config": {"K": 2}}
    mf = tmp_path / "m.json"
    mf.write_text(json.dumps(manifest))
    out = tmp_path / "out"
    assert main(["harmonize", "--manifest", str(mf), "--out-dir", str(out), "--combat", "off"]) == EXIT_OK
    prov = json.loads((out / "provenance.json").read_text())
    assert prov["combat"] is False and prov["basis"]["K"] == 2
    assert sorted(prov["outputs"]) == ["a_FA_harmonized.nii", "a_FA_original.nii",
                                       "b_FA_harmonized.nii", "b_FA_original.nii"]
    fa_a = read_nifti(out / "a_FA_harmonized.nii").data
    fa_b = read_nifti(out / "b_FA_harmonized.nii").data
    assert np.array_equal(fa_a, fa_b)
    del manifest["datasets"][1]["batch"]
    mf.write_text(json.dumps(manifest))
    assert main(["harmonize", "--manifest", str(mf), "--out-dir", str(out)]) == EXIT_INVALID


def _bench(tmp_path, name, *extra):
    out = tmp_path / name
    assert main(["benchmark", "--protocols", "table1", "--replications", "2", "--seed", "7",
                 "--dims", "6", "6", "4", "--out", str(out), *extra]) == EXIT_OK
    return out.read_bytes()


def test_benchmark_csv_reproducible(tmp_path):
    a = _bench(tmp_path, "a.csv")
    assert a == _bench(tmp_path, "b.csv") == _bench(tmp_path, "c.csv", "--threads", "3")
    rows = list(csv.DictReader(a.decode().splitlines()))
    assert len(rows) == 6 * 2 + 6
    for r in rows:
        assert r["n_train"] == "105" and r["n_test"] == "66"
        assert float(r["polyrbf_mse"]) < float(r["baseline_mse"])


def test_benchmark_bad_protocol():
    assert main(["benchmark", "--protocols", "1,9", "--replications", "1"]) == EXIT_INVALID
