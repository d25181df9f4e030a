import csv
import json
import math

import numpy as np
import pytest

from qvar.cli import EXIT_INFEASIBLE, EXIT_INVALID, EXIT_OK, histogram, main
from qvar.config import ExperimentConfig
from qvar.dual_mc import SimConfig
from qvar.errors import InvalidParameterError


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"sim": {"M": 20000, "N": 50}, "epsilon_grid": [0.0, 0.1, 0.2, 0.35, 0.5, 1.0]}))
    return p


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    assert ExperimentConfig.load(p) == ExperimentConfig()
    assert ExperimentConfig.load(None).sim == SimConfig()


def test_config_round_trip():
    c = ExperimentConfig.from_dict({"model": {"x0": 0.8}, "pinn": {"y_domain": [0.3, 2.0]}})
    assert ExperimentConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


@pytest.mark.parametrize("raw", [{"modle": {}}, {"model": {"sigm": 1}}, {"epsilon_grid": []},
                                 {"model": {"sigma": -1}}, {"epsilon_grid": [2.0]}])
def test_bad_config(raw):
    with pytest.raises(InvalidParameterError):
        ExperimentConfig.from_dict(raw)


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["solve", "--config", str(p), "--out", str(tmp_path)]) == EXIT_INVALID
    assert main(["solve", "--epsilon", "2", "--out", str(tmp_path)]) == EXIT_INVALID


def test_solve_lagrange(tmp_path, capsys):
    assert main(["solve", "--epsilon", "0.35", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["lambda_star"] == pytest.approx(0.483, abs=0.005)
    for key in ("y0", "u", "u_c", "p_at_L", "p_at_0", "x_hat"):
        assert key in doc
    man = json.loads((tmp_path / "manifest_solve.json").read_text())
    assert man["config"]["model"]["x0"] == 1.0 and man["build"]


def test_solve_infeasible(tmp_path, capsys):
    code = main(["solve", "--epsilon", "0.2", "--x0", "0.6", "--out", str(tmp_path)])
    assert code == EXIT_INFEASIBLE
    doc = json.loads(capsys.readouterr().out)
    assert doc["feasibility"] == "Infeasible"
    assert doc["x_hat"] == pytest.approx(0.66, abs=0.02)


def test_solve_mc(tmp_path, capsys):
    assert main(["solve", "--method", "mc", "--epsilon", "0", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["lambda_star"] == pytest.approx(1.65, abs=0.05)


def test_sweep_columns_and_shape(tmp_path, small_config):
    assert main(["sweep", "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_OK
    rows = _read(tmp_path / "sweep_lagrange.csv")
    assert list(rows[0]) == ["epsilon", "feasibility", "lambda_star", "y0", "form", "u", "u_c", "p_at_L",
                             "p_at_0", "p_above_L", "x_hat"]
    lam = [float(r["lambda_star"]) for r in rows]
    assert np.all(np.diff(lam) <= 0)
    eps0 = float(rows[-1]["p_at_0"])
    for r in rows:
        e, h = float(r["epsilon"]), float(r["p_above_L"])
        assert h == pytest.approx(1 - e if e <= eps0 else 1 - eps0, abs=1e-5)
    assert main(["solve", "--epsilon", "1", "--out", str(tmp_path / "s")]) == EXIT_OK
    end = _read(tmp_path / "s" / "solve_lagrange.csv")[0]
    assert end == rows[-1]


def test_sweep_mc_writes_lambda_table(tmp_path, small_config):
    assert main(["sweep", "--method", "mc", "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_OK
    rows = _read(tmp_path / "lambda_sweep_mc.csv")
    assert list(rows[0]) == ["lambda", "y_star", "u_c", "u", "h", "p_at_L", "p_at_0"]
    assert len(rows) == 51


@pytest.mark.parametrize("cmd", [["sweep", "--method", "mc"], ["dist"], ["feasibility"]])
def test_byte_identical_reruns(tmp_path, small_config, monkeypatch, cmd):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(cmd + ["--config", str(small_config), "--out", str(a)]) == EXIT_OK
    monkeypatch.setenv("QVAR_THREADS", "3")
    assert main(cmd + ["--config", str(small_config), "--out", str(b)]) == EXIT_OK
    files = sorted(p.name for p in a.iterdir() if p.suffix == ".csv")
    assert files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_six_significant_digits(tmp_path, small_config):
    main(["sweep", "--config", str(small_config), "--out", str(tmp_path)])
    for r in _read(tmp_path / "sweep_lagrange.csv"):
        for k in ("lambda_star", "y0", "u", "u_c"):
            digits = r[k].lstrip("-").replace(".", "").lstrip("0").split("e")[0]
            assert len(digits) <= 6


def test_dist(tmp_path, problem, small_config):
    assert main(["dist", "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_OK
    k = problem.knots
    for lam, name in ((0.0, "0"), (1.5, "1.5"), (2.5, "2.5")):
        rows = _read(tmp_path / f"dist_lambda_{name}.csv")
        atom_L = rows[1]
        assert float(atom_L["bin_left"]) == 0.9 == float(atom_L["bin_right"])
        if lam == 0:
            assert float(atom_L["frequency"]) == 0.0
        bins = rows[2:]
        start = float(bins[0]["bin_left"])
        c = k.case(lam)
        knot = k.z_tilde if c.tag.value == "TwoSegment" else c.z_tilde0
        assert start >= knot * (1 - 5e-6)  # CSV keeps six significant digits
        total = sum(float(r["frequency"]) for r in rows)
        assert total == pytest.approx(1.0, abs=1e-9)
        # exponential-type tail: log frequency decreasing over the upper part of the support
        f = np.array([float(r["frequency"]) for r in bins])
        top = f[len(f) // 4: len(f) // 2]
        top = top[top > 0]
        assert np.all(np.diff(np.log(top)) < 0.2)
        assert top[-1] < top[0]


def test_histogram_atoms():
    X = np.array([0.0, 0.0, 0.9, 2.0, 3.0, 4.0])
    rows = histogram(X, 0.9, bins=3)
    assert rows[0] == (0.0, 0.0, pytest.approx(2 / 6))
    assert rows[1] == (0.9, 0.9, pytest.approx(1 / 6))
    assert sum(r[2] for r in rows) == pytest.approx(1.0)


def test_feasibility(tmp_path, capsys):
    assert main(["feasibility", "--out", str(tmp_path)]) == EXIT_OK
    curves = _read(tmp_path / "feasibility_curves.csv")
    by_x = {}
    for r in curves:
        by_x.setdefault(float(r["x0"]), []).append(r)
    h06 = [float(r["h"]) for r in by_x[0.6]]
    assert max(h06) < 0.8
    h066 = [float(r["h"]) for r in by_x[0.66]]
    assert h066[-1] == pytest.approx(0.8, abs=0.01) and np.all(np.diff(h066) >= 0)
    full = np.array([float(r["full_value"]) for r in by_x[0.8]])
    lam = np.array([float(r["lambda"]) for r in by_x[0.8]])
    j = int(np.argmin(full))
    assert 0 < j < len(full) - 1  # interior minimum in lambda of the full value
    summary = {float(r["x0"]): r for r in _read(tmp_path / "feasibility_summary.csv")}
    assert summary[0.6]["lagrange"] == "Infeasible" and summary[0.73]["lagrange"] == "Feasible"
    assert float(summary[0.8]["lambda_mc"]) == pytest.approx(lam[j], abs=0.1)


def test_table1_without_network(tmp_path, capsys):
    assert main(["table1", "--methods", "lagrange,mc", "--out", str(tmp_path)]) == EXIT_OK
    rows = _read(tmp_path / "table1.csv")
    assert len(rows) == 4 * 2 * 6
    for r in rows:
        if r["method"] == "lagrange":
            assert abs(float(r["diff"])) <= 0.005
    p0 = [r for r in rows if r["method"] == "mc" and r["epsilon"] == "0.35" and r["statistic"] == "p_at_0"]
    assert float(p0[0]["value"]) == pytest.approx(0.35, abs=1e-3)


def test_plot_flag_writes_figures(tmp_path, small_config):
    assert main(["sweep", "--plot", "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "sweep_lagrange.png").stat().st_size > 0
