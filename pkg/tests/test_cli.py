import json
import math
import subprocess
import sys

import numpy as np
import pytest

from qrstab import cli


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(text):
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def test_solve_scalar_decay(capsys):
    code, out, err = run(["solve", "--problem", "scalar", "--param", "lam=-1", "--tab", "DP-7-5-4", "--tol", "1e-8"], capsys)
    assert code == 0
    header, rows = read_csv(out)
    assert header == ["t", "x_0", "h", "scheme"]
    assert rows[0][2] == "nan" and rows[0][3] == "-"
    assert float(rows[-1][0]) == 1.0
    assert abs(float(rows[-1][1]) - math.exp(-1)) <= 1e-5
    stats = json.loads(err.strip().splitlines()[-1])
    assert stats["nsteps_accepted"] == len(rows) - 1


def test_solve_2dlin_large_fixed_step_grows(capsys):
    code, out, _ = run(["solve", "--problem", "2dlin", "--tab", "SDIRK-2-2-1", "--fixed-h", "1", "--tend", "30"], capsys)
    assert code == 0
    _, rows = read_csv(out)
    norms = [math.hypot(float(r[1]), float(r[2])) for r in rows]
    assert norms[-1] > 1e3 * norms[0]


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"problem": "scalar", "params": {"lam": -2.0}, "tab": "BS-4-2-3", "tol": 1e-8, "t_end": 0.5}))
    code, out, _ = run(["solve", "--config", str(cfg), "--tend", "1"], capsys)
    assert code == 0
    _, rows = read_csv(out)
    assert float(rows[-1][0]) == 1.0
    assert float(rows[-1][1]) == pytest.approx(math.exp(-2), abs=1e-6)


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"problem": "scalar", "tabb": "HEU-2-2-1"}))
    code, _, err = run(["solve", "--config", str(cfg)], capsys)
    assert code == 1 and "tabb" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["solve", "--problem", "scalar", "--tab", "RK-9-9-9"],
        ["solve", "--problem", "scalar"],
        ["solve", "--problem", "scalar", "--tab", "HEU-2-2-1", "--tol", "-1"],
        ["solve", "--problem", "scalar", "--explicit-tab", "HEU-2-2-1"],
        ["solve", "--problem", "scalar", "--explicit-tab", "HEU-2-2-1", "--implicit-tab", "SDIRK-2-2-1"],
        ["solve", "--problem", "scalar", "--param", "kind=bogus", "--tab", "HEU-2-2-1"],
    ],
)
def test_usage_errors(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 1 and err.startswith("qrstab:")


@pytest.mark.parametrize(
    "argv",
    [["solve", "--bogus"], ["solve", "--problem", "nope"], ["solve", "--param", "novalue"], ["imex-bench", "neither"]],
)
def test_parser_rejects(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 1


def test_numerical_failure_exit_code(capsys):
    with np.errstate(over="ignore", invalid="ignore"):
        code, _, err = run(
            ["solve", "--problem", "scalar", "--param", "lam=-1e200", "--tab", "HEU-2-2-1", "--fixed-h", "1", "--tend", "5"],
            capsys,
        )
    assert code == 2 and "numerical failure" in err


def test_tableaux_dump(tmp_path, capsys):
    code, out, _ = run(["tableaux", "dump", "HEU-2-2-1"], capsys)
    assert code == 0
    assert out.startswith("# HEU-2-2-1\n")
    code, out_all, _ = run(["tableaux", "dump"], capsys)
    assert out_all.count("# ") == 7
    target = tmp_path / "tabs.csv"
    assert cli.main(["tableaux", "dump", "--out", str(target)]) == 0
    assert target.read_text() == out_all


def test_stiffness_outputs(tmp_path, capsys):
    out = tmp_path / "stiff"
    argv = ["stiffness", "--problem", "vdp", "--param", "mu=10", "--tab", "DP-7-5-4", "--tol", "1e-6", "--tend", "20", "--w", "2", "--out", str(out)]
    code, _, _ = run(argv, capsys)
    assert code == 0
    for name in ("stiffness.csv", "stiffness.gp", "stiffness.png"):
        assert (out / name).stat().st_size > 0
    header, rows = read_csv((out / "stiffness.csv").read_text())
    assert header == ["t", "h", "sigma1", "sigmad", "SI_w", "lognorm", "abs_SI_w", "abs_lognorm", "x_0"]
    assert rows[0][4] == "nan" and rows[2][4] != "nan"
    first = (out / "stiffness.csv").read_bytes()
    assert cli.main(argv) == 0
    assert (out / "stiffness.csv").read_bytes() == first


def test_stiffness_switching_run_has_scheme_column(capsys):
    argv = [
        "stiffness", "--problem", "scalar", "--param", "lam=-50", "--explicit-tab", "HEU-2-2-1",
        "--implicit-tab", "SDIRK-2-2-1", "--H0", "0.2", "--tol", "1e-6",
    ]
    code, out, _ = run(argv, capsys)
    assert code == 0
    header, rows = read_csv(out)
    assert header[6] == "scheme"
    assert rows[0][6] == "E" and {r[6] for r in rows} == {"E", "I"}
    assert float(rows[5][2]) == pytest.approx(-50, rel=1e-3)


def test_spectra_cosine_example(tmp_path, capsys):
    target = tmp_path / "ly.csv"
    argv = [
        "spectra", "--problem", "scalar", "--param", "kind=cosine_counterexample", "--tab", "SDIRK-2-2-1",
        "--fixed-h", "0.01", "--tend", "150", "--window-time", "25", "--out", str(target),
    ]
    code, _, err = run(argv, capsys)
    assert code == 0 and "sacker-sell" in err
    report = json.loads(target.with_suffix(".json").read_text())
    assert report["sackersell_beta"][0] == pytest.approx(-0.1, abs=1e-2)
    header, rows = read_csv(target.read_text())
    assert header == ["t", "s_0"] and len(rows) == 15000


def test_spectra_nonlinear_step_refinement(capsys):
    finals = []
    for h in ("0.005", "0.0025"):
        code, out, _ = run(["spectra", "--problem", "vdp", "--param", "mu=1", "--tab", "DP-7-5-4", "--fixed-h", h, "--tend", "20"], capsys)
        assert code == 0
        _, rows = read_csv(out)
        finals.append([float(v) for v in rows[-1][1:]])
    np.testing.assert_allclose(finals[0], finals[1], rtol=1e-2)
    assert finals[0][1] < finals[0][0] < 0


def test_spectra_linear_needs_fixed_step(capsys):
    code, _, err = run(["spectra", "--problem", "2dlin", "--tab", "HEU-2-2-1"], capsys)
    assert code == 1 and "--fixed-h" in err


def test_bench_threads(monkeypatch):
    monkeypatch.delenv("QRSTAB_THREADS", raising=False)
    assert cli.bench_threads() == 1
    monkeypatch.setenv("QRSTAB_THREADS", "4")
    assert cli.bench_threads() == 4
    monkeypatch.setenv("QRSTAB_THREADS", "0")
    assert cli.bench_threads() == 1
    monkeypatch.setenv("QRSTAB_THREADS", "many")
    with pytest.raises(cli.UsageError):
        cli.bench_threads()


def test_bench_cells_layout():
    cells = cli.bench_cells("fhn", [1e-4, 1e-6], {})
    assert [c.label for c in cells[:4]] == ["Mfhn1", "Mfhn2", "Mfhn3", "Mfhn4"]
    assert len(cells) == 8
    with pytest.raises(cli.UsageError):
        cli.bench_cells("other", [1e-4], {})


@pytest.mark.slow
def test_imex_bench_quick_compost(tmp_path, monkeypatch):
    out = tmp_path / "bench.csv"
    monkeypatch.setenv("QRSTAB_THREADS", "2")
    assert cli.main(["imex-bench", "compost", "--tol", "1e-4", "--quick", "--out", str(out)]) == 0
    header, rows = read_csv(out.read_text())
    assert header == cli.BENCH_COLUMNS
    assert [r[0] for r in rows] == ["Mcpb1", "Mcpb2", "Mcpb3"]
    assert rows[0][5] == "NA" and rows[1][4] == "NA"
    monkeypatch.setenv("QRSTAB_THREADS", "1")
    again = tmp_path / "again.csv"
    assert cli.main(["imex-bench", "compost", "--tol", "1e-4", "--quick", "--out", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "qrstab", "tableaux", "dump", "BS-4-2-3"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("# BS-4-2-3")
