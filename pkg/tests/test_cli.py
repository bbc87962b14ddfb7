import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cgsysid import io
from cgsysid import kernels as K
from cgsysid import volterra as V
from cgsysid.cli import main

DATA = Path(__file__).parent / "data"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def spec_file(path, n, repr_=None, offset=None):
    obj = {"n": n, "kernels": {"2": {"repr": repr_, "k": 1, "leaf_size": 2}} if repr_ else {}}
    if offset is not None:
        obj["input_offset"] = offset
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def filament_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("fil")
    for name, length, seed in (("train", 1531, 1), ("held", 1531, 2)):
        assert main(["gen-signal", "--length", str(length), "--seed", str(seed),
                     "--out", str(d / f"{name}_v.csv")]) == 0
        assert main(["simulate-filament", "--signal", str(d / f"{name}_v.csv"),
                     "--out", str(d / f"{name}.csv")]) == 0
    return d


# ---------------------------------------------------------------------------


@pytest.mark.parametrize("argv, lines", [
    (["--n", 16], ["param_count 128", "closed_form_bound 144"]),
    (["--n", 16, "--repr", "dense"], ["param_count 256"]),
    (["--n", 16, "--repr", "toeplitz_sym"], ["param_count 16"]),
    (["--n", 128, "--leaf", 1], ["param_count 1920", "closed_form_bound 1920"]),
])
def test_param_count(capsys, argv, lines):
    code, out, _ = run(capsys, "param-count", *argv)
    assert code == 0 and out.splitlines() == lines


def test_simulate_matches_golden(tmp_path):
    assert main(["simulate-filament", "--signal", str(DATA / "golden_voltage.csv"),
                 "--out", str(tmp_path / "out.csv")]) == 0
    got = io.read_dataset(tmp_path / "out.csv")
    ref = io.read_dataset(DATA / "golden_filament.csv")
    assert np.array_equal(got.input.samples, ref.input.samples)
    assert np.allclose(got.output.samples, ref.output.samples, rtol=1e-14, atol=0)


def test_gen_signal_reproducible(tmp_path):
    main(["gen-signal", "--length", "300", "--seed", "0", "--out", str(tmp_path / "v.csv")])
    assert (tmp_path / "v.csv").read_bytes() == (DATA / "golden_voltage.csv").read_bytes()
    for kind in ("white", "lowpass"):
        assert main(["gen-signal", "--length", "50", "--kind", kind, "--out", str(tmp_path / "k.csv")]) == 0
        assert len(io.read_signal(tmp_path / "k.csv")) == 50


def test_simulate_zero_voltage(tmp_path):
    io.write_signal(tmp_path / "z.csv", V.SignalSeries(np.zeros(200)))
    (tmp_path / "p.json").write_text(json.dumps({"T_init": 1.0}))
    assert main(["simulate-filament", "--signal", str(tmp_path / "z.csv"), "--params",
                 str(tmp_path / "p.json"), "--out", str(tmp_path / "d.csv")]) == 0
    L = io.read_dataset(tmp_path / "d.csv").output.samples
    assert np.all(np.diff(L) < 0)


def test_fit_eval_export(capsys, filament_files, tmp_path):
    d = filament_files
    vafs = {}
    for name, repr_ in (("linear", None), ("hier", "hierarchical")):
        spec = spec_file(tmp_path / f"{name}.json", 32, repr_)
        code, out, err = run(capsys, "fit", "--data", d / "train.csv", "--model-spec", spec,
                             "--epochs", 400, "--out", tmp_path / f"{name}.model.json",
                             "--history", tmp_path / f"{name}.hist.csv", "--heldout", d / "held.csv")
        assert code == 0, err
        code, out, _ = run(capsys, "eval", "--data", d / "held.csv", "--model", tmp_path / f"{name}.model.json")
        assert code == 0
        vafs[name] = float(out)
        model = io.load_model(tmp_path / f"{name}.model.json")
        assert vafs[name] == pytest.approx(V.heldout_vaf(model, io.read_dataset(d / "held.csv")), abs=1e-6)
    assert vafs["hier"] > vafs["linear"]

    hist = (tmp_path / "hier.hist.csv").read_text().splitlines()
    assert hist[0] == "epoch,loss,vaf_on_heldout" and len(hist) > 2

    code, _, _ = run(capsys, "export-kernel", "--model", tmp_path / "hier.model.json", "--out", tmp_path / "h2.csv")
    assert code == 0
    grid = io.read_matrix(tmp_path / "h2.csv")
    model = io.load_model(tmp_path / "hier.model.json")
    assert grid.shape == (32, 32) and np.array_equal(grid, K.to_dense(model.kernels[2]).values)


def test_fit_reproducible(capsys, filament_files, tmp_path):
    spec = spec_file(tmp_path / "s.json", 16, "hierarchical", offset="mean")
    outs = []
    for i in range(2):
        code, _, _ = run(capsys, "fit", "--data", filament_files / "train.csv", "--model-spec", spec,
                         "--epochs", 100, "--seed", 3, "--l2", 1e-3,
                         "--out", tmp_path / f"m{i}.json", "--history", tmp_path / f"h{i}.csv")
        assert code == 0
        outs.append(((tmp_path / f"m{i}.json").read_bytes(), (tmp_path / f"h{i}.csv").read_bytes()))
    assert outs[0] == outs[1]
    model = io.load_model(tmp_path / "m0.json")
    x = io.read_dataset(filament_files / "train.csv").input.samples
    assert model.input_offset == pytest.approx(x.mean(), rel=1e-15)


def test_overfitting_small_data(capsys, filament_files, tmp_path):
    # 160 valid samples, 1 + 64 + 4096 dense parameters vs 1 + 64 + 704 hierarchical
    full = io.read_dataset(filament_files / "train.csv")
    small = V.Dataset(V.SignalSeries(full.input.samples[:223]), V.SignalSeries(full.output.samples[:223]))
    io.write_dataset(tmp_path / "small.csv", small)
    vafs = {}
    for repr_ in ("dense", "hierarchical"):
        spec = spec_file(tmp_path / f"{repr_}.json", 64, repr_, offset="mean")
        assert run(capsys, "fit", "--data", tmp_path / "small.csv", "--model-spec", spec, "--l2", 0,
                   "--epochs", 1500, "--out", tmp_path / f"{repr_}.m.json")[0] == 0
        code, out, _ = run(capsys, "eval", "--data", filament_files / "held.csv",
                           "--model", tmp_path / f"{repr_}.m.json")
        vafs[repr_] = float(out)
    assert vafs["dense"] < vafs["hierarchical"]


def test_export_zero_model_and_operator(capsys, tmp_path):
    spec = V.ModelSpec(8, {2: K.KernelSpec("hierarchical", 2, 8)})
    io.save_model(tmp_path / "z.json", V.zero_model(spec))
    assert run(capsys, "export-kernel", "--model", tmp_path / "z.json", "--out", tmp_path / "z.csv")[0] == 0
    assert np.array_equal(io.read_matrix(tmp_path / "z.csv"), np.zeros((8, 8)))
    assert run(capsys, "export-kernel", "--model", tmp_path / "z.json", "--order", 1,
               "--out", tmp_path / "h1.csv")[0] == 0
    assert io.read_matrix(tmp_path / "h1.csv").shape == (1, 8)
    assert run(capsys, "export-operator", "--N", 8, "--out", tmp_path / "A.csv")[0] == 0
    assert io.read_matrix(tmp_path / "A.csv").shape == (8, 8)


def test_synth_sweep_small(capsys, tmp_path):
    argv = ["synth-sweep", "--sigmas", "0.1,0.3", "--classes", "toeplitz_sym,dense", "--N", 8,
            "--repeats", 1, "--target-vaf", 90]
    for name in ("a", "b"):
        assert run(capsys, *argv, "--out", tmp_path / f"{name}.csv")[0] == 0
    a = (tmp_path / "a.csv").read_text().splitlines()
    assert len(a) == 1 + 4 and a[0] == "class,sigma,m_star,median_vaf,saturated_flag"
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_budget_curve_small(capsys, tmp_path):
    argv = ["budget-curve", "--budgets", "100,400,1600", "--classes", "linear", "--n", 16,
            "--repeats", 3, "--epochs", 300, "--l2-grid", "0", "--offsets", "none"]
    for name in ("a", "b"):
        assert run(capsys, *argv, "--out", tmp_path / f"{name}.csv", "--cells", tmp_path / f"{name}.cells.csv")[0] == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.cells.csv").read_bytes() == (tmp_path / "b.cells.csv").read_bytes()
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0] == "budget,class,median_heldout_vaf,repeats" and len(rows) == 4
    vafs = [float(r.split(",")[2]) for r in rows[1:]]
    # more data helps overall; adjacent budgets can tie within training noise
    assert vafs[-1] > vafs[0]


# ---------------------------------------------------------------------------
# malformed input


def _bad_files(tmp_path):
    (tmp_path / "bad.csv").write_text("# sample_rate=750\ninput,output\n1,oops\n")
    (tmp_path / "bad.json").write_text("{")
    (tmp_path / "list.json").write_text("[1]")
    (tmp_path / "spec.json").write_text(json.dumps({"n": 12}))
    (tmp_path / "params.json").write_text(json.dumps({"k9": 1}))
    io.write_signal(tmp_path / "v.csv", V.SignalSeries(np.full(40, 0.5)))
    io.write_dataset(tmp_path / "ok.csv", V.Dataset(V.SignalSeries(np.ones(40)), V.SignalSeries(np.ones(40))))
    spec_file(tmp_path / "okspec.json", 8)
    io.save_model(tmp_path / "lin.json", V.zero_model(V.ModelSpec(8)))


@pytest.mark.parametrize("argv", [
    ["simulate-filament", "--signal", "bad.csv", "--out", "o.csv"],
    ["simulate-filament", "--signal", "missing.csv", "--out", "o.csv"],
    ["simulate-filament", "--signal", "v.csv", "--params", "params.json", "--out", "o.csv"],
    ["simulate-filament", "--signal", "v.csv", "--params", "list.json", "--out", "o.csv"],
    ["fit", "--data", "bad.csv", "--model-spec", "okspec.json", "--out", "m.json"],
    ["fit", "--data", "ok.csv", "--model-spec", "bad.json", "--out", "m.json"],
    ["fit", "--data", "ok.csv", "--model-spec", "spec.json", "--out", "m.json"],
    ["fit", "--data", "ok.csv", "--model-spec", "list.json", "--out", "m.json"],
    ["eval", "--data", "ok.csv", "--model", "bad.json"],
    ["eval", "--data", "ok.csv", "--model", "list.json"],
    ["eval", "--data", "bad.csv", "--model", "lin.json"],
    ["export-kernel", "--model", "lin.json", "--out", "k.csv"],
    ["export-kernel", "--model", "okspec.json", "--out", "k.csv"],
    ["param-count", "--n", "12"],
    ["export-operator", "--N", "12", "--out", "A.csv"],
    ["synth-sweep", "--classes", "banded", "--out", "r.csv"],
    ["budget-curve", "--budgets", "100", "--classes", "banded", "--out", "r.csv"],
    ["budget-curve", "--budgets", "0", "--classes", "linear", "--out", "r.csv"],
])
def test_malformed_input_exits_nonzero(capsys, tmp_path, monkeypatch, argv):
    _bad_files(tmp_path)
    monkeypatch.chdir(tmp_path)
    code, _, err = run(capsys, *argv)
    assert code != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("cgsysid: error:")


def test_console_script_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "cgsysid.cli", "param-count", "--n", "16"],
                        capture_output=True, text=True)
    assert ok.returncode == 0 and "128" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "cgsysid.cli", "eval", "--data", str(tmp_path / "x.csv"),
                          "--model", str(tmp_path / "y.json")], capture_output=True, text=True)
    assert bad.returncode == 2 and len(bad.stderr.strip().splitlines()) == 1
    usage = subprocess.run([sys.executable, "-m", "cgsysid.cli", "fit"], capture_output=True, text=True)
    assert usage.returncode == 2
