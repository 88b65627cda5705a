import json
import subprocess
import sys

import numpy as np
import pytest

from ageifr.cli import FIT_OUTPUTS, main
from ageifr.data import load_dataset, write_dataset
from ageifr.diagnostics import read_diagnostics_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, study):
    root = tmp_path_factory.mktemp("cli")
    template, truth, data = study
    write_dataset(template, root / "template")
    write_dataset(data, root / "data")
    (root / "truth.json").write_text(json.dumps(truth.to_dict()))
    return root


def config(root, name, **entries):
    path = root / f"{name}.json"
    path.write_text(json.dumps({"data": "data", **entries}))
    return path


SHORT = {"seed": 3, "chains": 2, "warmup": 150, "samples": 100}


@pytest.mark.slow
def test_fit_defaults_end_to_end(workspace):
    cfg = config(workspace, "full", sampler={"seed": 20}, benchmark_ifr_60=0.005)
    out = workspace / "full"
    status = main(["fit", "--config", str(cfg), "--out", str(out)])
    for name in FIT_OUTPUTS:
        assert (out / name).exists()
    fit_time = read_diagnostics_csv(out / "diagnostics.csv")
    passed = all(r <= 1.01 and e >= 1000 for r, e in fit_time.values() if np.isfinite(r))
    assert status == (0 if passed else 2)
    assert json.loads((out / "run_manifest.json").read_text())["exit_status"] == status
    assert main(["diagnose", "--draws", str(out / "draws.csv"), "--out", str(workspace / "rediag")]) == status
    again = read_diagnostics_csv(workspace / "rediag" / "diagnostics.csv")
    for name, (rhat, ess) in fit_time.items():
        if np.isfinite(rhat):
            assert again[name][0] == pytest.approx(rhat, rel=0, abs=1e-12)


def test_fit_same_seed_identical(workspace):
    cfg = config(workspace, "short", sampler=SHORT, trace=["sigma_country"])
    a, b = workspace / "a", workspace / "b"
    assert main(["fit", "--config", str(cfg), "--out", str(a)]) in (0, 2)
    assert main(["fit", "--config", str(cfg), "--out", str(b)]) in (0, 2)
    assert (a / "draws.csv").read_bytes() == (b / "draws.csv").read_bytes()
    assert (a / "trace_sigma_country.csv").exists()
    manifest = json.loads((a / "run_manifest.json").read_text())
    assert manifest["seed"] == 3 and set(manifest["versions"]) >= {"ageifr", "numpy", "scipy", "numba"}
    # the manifest alone reproduces the run
    c = workspace / "c"
    main(["fit", "--config", str(a / "run_manifest.json"), "--out", str(c)])
    assert (c / "draws.csv").read_bytes() == (a / "draws.csv").read_bytes()


def test_seed_flag_overrides(workspace):
    cfg = config(workspace, "noseed", sampler={k: v for k, v in SHORT.items() if k != "seed"})
    assert main(["fit", "--config", str(cfg), "--out", str(workspace / "ns")]) == 1
    assert main(["fit", "--config", str(cfg), "--out", str(workspace / "s"), "--seed", "3"]) in (0, 2)


def test_bad_knot_exit_1(workspace, capsys):
    cfg = config(workspace, "bad", model={"serology_knots": {"boundary": [10, 120]}}, sampler=SHORT)
    assert main(["fit", "--config", str(cfg), "--out", str(workspace / "bad")]) == 1
    assert "serology_knots" in capsys.readouterr().err


def test_bad_data_exit_1(workspace, capsys):
    broken = workspace / "broken"
    write_dataset(load_dataset(workspace / "data"), broken)
    (broken / "serology.csv").write_text("location_id,age_lo,age_hi,n_tested,n_positive\nL1,9,20,10,11\n")
    cfg = workspace / "broken.json"
    cfg.write_text(json.dumps({"data": "broken", "sampler": SHORT}))
    assert main(["fit", "--config", str(cfg), "--out", str(workspace / "x")]) == 1
    assert "serology.csv" in capsys.readouterr().err


def test_simulate(workspace):
    cfg = workspace / "sim.json"
    cfg.write_text(json.dumps({"data": "template"}))
    for out in ("s1", "s2"):
        assert main(["simulate", "--config", str(cfg), "--truth", str(workspace / "truth.json"),
                     "--out", str(workspace / out), "--seed", "8"]) == 0
    assert load_dataset(workspace / "s1") == load_dataset(workspace / "s2")
    assert json.loads((workspace / "s1" / "truth.json").read_text())["seed"] == 8


def test_simulate_saturated(workspace):
    truth = json.loads((workspace / "truth.json").read_text())
    for l in truth["gamma"]:
        truth["gamma"][l] = [40.0, 0.0, 0.0]
    truth["sens"] = {t: 1.0 for t in truth["sens"]}
    truth["spec"] = {t: 1.0 for t in truth["spec"]}
    path = workspace / "sat.json"
    path.write_text(json.dumps(truth))
    cfg = workspace / "sim.json"
    cfg.write_text(json.dumps({"data": "template"}))
    assert main(["simulate", "--config", str(cfg), "--truth", str(path), "--out",
                 str(workspace / "sat"), "--seed", "1"]) == 0
    for loc in load_dataset(workspace / "sat").locations:
        assert all(o.n_positive == o.n_tested for o in loc.serology)


def test_diagnose_and_summarize(workspace):
    a = workspace / "a"
    if not (a / "draws.csv").exists():
        pytest.skip("needs the short fit")
    before = {p.name: p.read_bytes() for p in a.iterdir() if p.suffix in (".csv", ".json")}
    cfg = config(workspace, "short", sampler=SHORT)
    assert main(["summarize", "--config", str(cfg), "--draws", str(a / "draws.csv"),
                 "--out", str(workspace / "summ")]) == 0
    for name in ("curves.csv", "population_ifr.csv", "age60_ifr.csv", "rogan_gladen.csv"):
        assert (workspace / "summ" / name).read_bytes() == before[name]
    status = main(["diagnose", "--draws", str(a / "draws.csv"), "--out", str(workspace / "diag"),
                   "--trace", "beta_global[1]"])
    assert status in (0, 2)
    assert (workspace / "diag" / "diagnostics.csv").read_bytes() == before["diagnostics.csv"]
    assert (workspace / "diag" / "trace_beta_global_1.csv").exists()
    # inputs untouched
    assert {p.name: p.read_bytes() for p in a.iterdir() if p.name in before} == before


def test_diagnose_truncated(workspace, tmp_path):
    lines = (workspace / "a" / "draws.csv").read_text().splitlines() if (workspace / "a").exists() else [
        "chain,iteration,x", "1,1,0.5"]
    bad = tmp_path / "draws.csv"
    bad.write_text("\n".join(lines[:5]) + "\n1,5,0.1\n")
    assert main(["diagnose", "--draws", str(bad)]) == 1


def test_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "ageifr.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout
    r = subprocess.run([sys.executable, "-m", "ageifr.cli", "fit", "--config", str(tmp_path / "none.json"),
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 1 and "error:" in r.stderr
