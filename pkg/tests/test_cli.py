import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sidgrad.cli import ENV_OUT, main

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


QUAD_RUN = """
[problem]
kind = quadratic
noise = additive
noise_std = 0.1
lam = 0.5, -1
[variant]
names = Batch, StochConst, StochDec
[budget]
epochs = 40
checkpoints = 5
[seeds]
count = 5
"""


def test_run_writes_curves_and_overlay(tmp_path):
    cfg = _write(tmp_path, QUAD_RUN)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    curves = sorted(p.name for p in out.glob("curve_*.csv"))
    assert curves == ["curve_Batch.csv", "curve_StochConst.csv", "curve_StochDec.csv"]
    assert (out / "bounds_overlay.csv").exists() and (out / "runs.csv").exists()
    runs = _rows(out / "runs.csv")
    assert {r["variant"] for r in runs} == {"Batch", "StochConst", "StochDec"}
    assert {r["seed"] for r in runs} == {"0", "1", "2", "3", "4"}
    overlay = _rows(out / "bounds_overlay.csv")
    assert overlay and all(r["variant"] == "StochDec" for r in overlay)
    assert all(float(r["mse_mean"]) <= float(r["bound_total"]) for r in overlay)


def test_run_is_byte_identical_on_rerun(tmp_path):
    cfg = _write(tmp_path, QUAD_RUN)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(b), "--workers", "2"]) == 0
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_overrides_and_env_out_dir(tmp_path, monkeypatch):
    cfg = _write(tmp_path, QUAD_RUN)
    monkeypatch.setenv(ENV_OUT, str(tmp_path / "env"))
    assert main(["run", "--config", str(cfg), "--set", "variant.names=Batch", "--set", "seeds.count=1"]) == 0
    assert [p.name for p in (tmp_path / "env").glob("curve_*.csv")] == ["curve_Batch.csv"]
    assert len({r["seed"] for r in _rows(tmp_path / "env" / "runs.csv")}) == 1


@pytest.mark.parametrize("text", [
    QUAD_RUN + "\n[plotting]\ncolor = red\n",
    QUAD_RUN.replace("[budget]", "[budget]\nepohcs = 3"),
    QUAD_RUN.replace("epochs = 40", "epochs = forty"),
    QUAD_RUN.replace("names = Batch, StochConst, StochDec", "names = Adam"),
    QUAD_RUN.replace("kind = quadratic", "kind = svm"),
])
def test_config_errors_exit_2(tmp_path, capsys, text):
    cfg = _write(tmp_path, text)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_dataset_exit_2(tmp_path):
    cfg = _write(tmp_path, "[problem]\nkind = logistic\ndata_format = libsvm\ndata_path = nope.svm\nlam = 1\n"
                           "[variant]\nnames = Batch\n[budget]\nepochs = 2\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--config", str(tmp_path / "absent.ini")]) == 2


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_failure_exit_1(tmp_path, capsys):
    # ascent with a huge step overflows the hyperparameters after a few steps
    cfg = _write(tmp_path, """
[problem]
kind = quadratic
lam = 1, 1
[outer]
steps = 300
lr = -1e40
domain = unconstrained
estimator = oracle
""")
    assert main(["bilevel", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "aborted" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, "[problem]\nkind = toy\n[bounds]\nt = 10, 100\n")
    res = subprocess.run([sys.executable, "-m", "sidgrad", "bounds", "--config", str(cfg),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "sidgrad", "bounds", "--bogus"], capture_output=True)
    assert res.returncode == 2


# -- bilevel

BILEVEL = """
[problem]
kind = logistic
data_format = synthetic
n_train = 32
n_features = 4
batch_size = 4
reg_mode = per_feature
lam = exp_uniform:1
[outer]
steps = 4
lr = {lr}
lam_min = 0.001
warm_start = {warm}
epochs = 3
"""


def test_bilevel_zero_lr_constant_trace(tmp_path):
    cfg = _write(tmp_path, BILEVEL.format(lr=0, warm="true"))
    assert main(["bilevel", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "outer_trace.csv")
    assert len(rows) == 4
    for key in ("lam_0", "lam_3"):
        assert len({r[key] for r in rows}) == 1


def test_bilevel_warm_start_first_row_identical(tmp_path):
    outs = []
    for warm in ("true", "false"):
        cfg = _write(tmp_path, BILEVEL.format(lr=0.5, warm=warm), f"{warm}.ini")
        assert main(["bilevel", "--config", str(cfg), "--out", str(tmp_path / warm)]) == 0
        outs.append(_rows(tmp_path / warm / "outer_trace.csv"))
    grads = [[r[f"grad_{i}"] for i in range(4)] for r in (outs[0][0], outs[1][0])]
    assert grads[0] == grads[1]


def test_bilevel_oracle_monotone(tmp_path):
    cfg = _write(tmp_path, "[problem]\nkind = quadratic\nlam = 0, 0\n[outer]\nsteps = 30\nlr = 3\n"
                           "domain = unconstrained\nestimator = oracle\n")
    assert main(["bilevel", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    f = [float(r["f_val"]) for r in _rows(tmp_path / "o" / "outer_trace.csv")]
    assert all(b <= a for a, b in zip(f, f[1:]))


def test_bilevel_requires_outer_section(tmp_path):
    cfg = _write(tmp_path, "[problem]\nkind = quadratic\nlam = 0, 0\n")
    assert main(["bilevel", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_shipped_bilevel_config_reaches_optimum(tmp_path):
    assert main(["bilevel", "--config", str(CONFIGS / "quadratic_bilevel.ini"),
                 "--out", str(tmp_path)]) == 0
    last = _rows(tmp_path / "outer_trace.csv")[-1]
    assert abs(float(last["lam_0"]) - 2) < 0.5 and abs(float(last["lam_1"]) - 4) < 0.5


# -- bounds

CONSTS = """
[constants]
q = 0.5
L_E = 1
nu1 = 0.5
nu2 = 0.5
mu1 = 1
mu2 = 0
L_Phi = 1
L_PhiTilde = 0.5
m2 = {m2}
sigma_lam1 = 0.1
{extra}
[bounds]
t = 10, 100, 1000, 10000
w_norm = 1
"""


def test_bounds_from_constants(tmp_path):
    cfg = _write(tmp_path, CONSTS.format(m2=0, extra=""))
    assert main(["bounds", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "bounds.csv")
    assert list(rows[0]) == ["t", "k", "rho", "sigma", "bias", "var_inner", "var_outer", "total",
                             "floor", "indicative"]
    assert all(float(r["floor"]) == 0.0 for r in rows)
    total = [float(r["total"]) for r in rows]
    assert all(b < a for a, b in zip(total, total[1:]))
    assert all(r["indicative"] == "0" for r in rows)


def test_bounds_floor_and_indicative(tmp_path):
    cfg = _write(tmp_path, CONSTS.format(m2=0.1, extra="estimated = q"))
    assert main(["bounds", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "bounds.csv")
    assert float(rows[0]["floor"]) == pytest.approx(2 * 0.1 / 0.25)
    assert all(r["indicative"] == "1" for r in rows)


def test_bounds_estimated_problem_constants(tmp_path):
    cfg = _write(tmp_path, "[problem]\nkind = toy\n[bounds]\nsource = estimate\nt = 10, 100\n")
    assert main(["bounds", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert all(r["indicative"] == "1" for r in _rows(tmp_path / "o" / "bounds.csv"))


def test_bounds_geometric_rates(tmp_path):
    cfg = _write(tmp_path, CONSTS.format(m2=0, extra="") + "rate = geometric\n")
    assert main(["bounds", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    total = [float(r["total"]) for r in _rows(tmp_path / "o" / "bounds.csv")]
    assert all(b <= a for a, b in zip(total, total[1:]))


def test_bounds_rejects_noncontraction(tmp_path):
    cfg = _write(tmp_path, CONSTS.format(m2=0, extra="").replace("q = 0.5", "q = 1.0"))
    assert main(["bounds", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


# -- convert

def test_convert_idx_csv_idx_round_trip(tmp_path):
    src_img = ROOT / "data" / "mnist" / "mnist5k-images-idx3-ubyte.gz"
    src_lab = ROOT / "data" / "mnist" / "mnist5k-labels-idx1-ubyte.gz"
    if not src_img.exists():
        pytest.skip("MNIST subset not present")
    from sidgrad.data import load_idx, write_idx
    small_img, small_lab = tmp_path / "s_img.idx", tmp_path / "s_lab.idx"
    write_idx(load_idx(src_img, src_lab).subset(np.arange(20)), small_img, small_lab)
    csv_path = tmp_path / "d.csv"
    assert main(["convert", "--from", "idx", "--to", "csv", "--input", str(small_img),
                 "--input-labels", str(small_lab), "--output", str(csv_path)]) == 0
    out_img, out_lab = tmp_path / "o_img.idx", tmp_path / "o_lab.idx"
    assert main(["convert", "--from", "csv", "--to", "idx", "--input", str(csv_path),
                 "--output", str(out_img), "--output-labels", str(out_lab)]) == 0
    assert out_img.read_bytes()[16:] == small_img.read_bytes()[16:]
    assert out_lab.read_bytes() == small_lab.read_bytes()


def test_convert_idx_round_trip_keeps_image_shape(tmp_path):
    import struct
    img, lab = tmp_path / "i.idx", tmp_path / "l.idx"
    img.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([0, 255, 51, 102, 0, 0, 0, 7]))
    lab.write_bytes(struct.pack(">II", 0x801, 2) + bytes([3, 8]))
    c = tmp_path / "d.csv"
    assert main(["convert", "--from", "idx", "--to", "csv", "--input", str(img), "--input-labels", str(lab),
                 "--output", str(c)]) == 0
    img2, lab2 = tmp_path / "i2.idx", tmp_path / "l2.idx"
    assert main(["convert", "--from", "csv", "--to", "idx", "--input", str(c), "--output", str(img2),
                 "--output-labels", str(lab2)]) == 0
    assert img2.read_bytes() == img.read_bytes() and lab2.read_bytes() == lab.read_bytes()


def test_convert_malformed_libsvm_exit_2(tmp_path):
    bad = _write(tmp_path, "1 3:1 2:1\n", "bad.svm")
    assert main(["convert", "--from", "libsvm", "--to", "csv", "--input", str(bad),
                 "--output", str(tmp_path / "x.csv")]) == 2
    assert main(["convert", "--from", "libsvm", "--to", "csv", "--input", str(tmp_path / "missing.svm"),
                 "--output", str(tmp_path / "x.csv")]) == 2


def test_convert_csv_header_equivalence(tmp_path):
    from sidgrad.data import load_csv
    src = _write(tmp_path, "1 1:0.5 3:2\n-1 2:1\n", "a.svm")
    with_h, without_h = tmp_path / "h.csv", tmp_path / "n.csv"
    assert main(["convert", "--from", "libsvm", "--to", "csv", "--input", str(src), "--output", str(with_h)]) == 0
    assert main(["convert", "--from", "libsvm", "--to", "csv", "--input", str(src), "--output", str(without_h),
                 "--no-header"]) == 0
    assert with_h.read_text().splitlines()[1:] == without_h.read_text().splitlines()
    np.testing.assert_array_equal(load_csv(with_h).X, load_csv(without_h).X)
    np.testing.assert_array_equal(load_csv(with_h).X, [[0.5, 0, 2], [0, 1, 0]])
