import json

import numpy as np
import pytest

from marginflow.cli import main
from marginflow.datasets import load_csv
from marginflow.io import read_records_csv
from oracles import qp_max_margin


def write_config(path, **kw):
    cfg = {"net": {"layer_widths": [2, 1], "activation": "linear"}, "loss": "exp",
           "gamma": 0.5, "iterations": 2000, "seed": 0, "record_stride": 10,
           "snapshot_stride": 500}
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture
def linear_data(tmp_path):
    assert main(["gen-data", "linear", "--n", "20", "--d", "2", "--margin", "0.3",
                 "--seed", "0", "--out", str(tmp_path)]) == 0
    return str(tmp_path / "linear.csv")


def test_gen_data_linear_writes_csv_and_meta(tmp_path):
    assert main(["gen-data", "linear", "--n", "100", "--d", "2", "--margin", "0.5",
                 "--seed", "7", "--out", str(tmp_path)]) == 0
    ds = load_csv(tmp_path / "linear.csv")
    assert ds.n == 100
    meta = json.loads((tmp_path / "linear.meta.json").read_text())
    assert len(meta["nu"]) == 2


def test_gen_data_xor_ring(tmp_path):
    assert main(["gen-data", "xor-ring", "--n", "16", "--out", str(tmp_path)]) == 0
    assert load_csv(tmp_path / "xor-ring.csv").n == 16


def test_missing_flag_is_usage_error(tmp_path, capsys):
    assert main(["gen-data", "linear", "--d", "2", "--out", str(tmp_path)]) == 1
    assert "--n" in capsys.readouterr().err
    assert main(["gen-data", "linear", "--n", "5", "--out", str(tmp_path)]) == 1
    assert main([]) == 1


def test_invalid_generator_parameters(tmp_path):
    assert main(["gen-data", "xor-ring", "--n", "10", "--out", str(tmp_path)]) == 1
    assert main(["gen-data", "linear", "--n", "5", "--d", "2", "--margin", "2.0",
                 "--out", str(tmp_path)]) == 1


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MARGINFLOW_OUTDIR", str(tmp_path / "env"))
    assert main(["gen-data", "xor-ring", "--n", "8"]) == 0
    assert (tmp_path / "env" / "xor-ring.csv").exists()
    # an explicit flag wins over the environment
    assert main(["gen-data", "xor-ring", "--n", "8", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "xor-ring.csv").exists()


def test_train_is_byte_deterministic(tmp_path, linear_data, capsys):
    cfg = write_config(tmp_path / "c.json", net={"layer_widths": [2, 4, 1], "activation": "relu"},
                       batch_size=10, seed=3)
    assert main(["train", "--config", cfg, "--data", linear_data, "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "k_sep:" in out and "final normalized margin:" in out
    assert main(["train", "--config", cfg, "--data", linear_data, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "records.csv").read_bytes()
    assert a == (tmp_path / "b" / "records.csv").read_bytes()
    man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    man_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man_a["content_hash"] == man_b["content_hash"]


def test_train_linear_reaches_positive_margin_below_optimum(tmp_path, linear_data, capsys):
    cfg = write_config(tmp_path / "c.json", iterations=100_000, record_stride=100,
                       snapshot_stride=10_000)
    assert main(["train", "--config", cfg, "--data", linear_data, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    final = float(out.split("final normalized margin:")[1])
    ds = load_csv(linear_data)
    _, m_star = qp_max_margin(ds.X, ds.y)
    assert 0 < final <= m_star + 1e-9
    assert m_star - final < 0.05
    rows = read_records_csv(tmp_path / "records.csv")
    assert rows[-1].normalized_margin == final


def test_batch_larger_than_data_is_config_error(tmp_path, linear_data, capsys):
    cfg = write_config(tmp_path / "c.json", batch_size=21)
    assert main(["train", "--config", cfg, "--data", linear_data, "--out", str(tmp_path)]) == 1
    assert "batch" in capsys.readouterr().err


def test_bad_config_json(tmp_path, linear_data):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["train", "--config", str(p), "--data", linear_data]) == 1
    write_config(p, colour="blue")
    assert main(["train", "--config", str(p), "--data", linear_data]) == 1


def test_numerical_abort_exit_code(tmp_path, linear_data):
    cfg = write_config(tmp_path / "c.json", gamma=1e300, iterations=50,
                       init={"scale": 1.0, "target_norm": None})
    # flip the labels so the margin is negative and the steps blow up
    ds = load_csv(linear_data)
    flipped = tmp_path / "flipped.csv"
    rows = np.column_stack([ds.X, -ds.y])
    np.savetxt(flipped, rows, delimiter=",", fmt="%.17g")
    assert main(["train", "--config", cfg, "--data", str(flipped), "--out", str(tmp_path / "r")]) == 2
    diag = json.loads((tmp_path / "r" / "abort.json").read_text())
    assert "error" in diag and np.all(np.isfinite(diag["last_w"]))


def test_analyze_writes_summary(tmp_path, linear_data):
    cfg = write_config(tmp_path / "c.json", iterations=5000, record_stride=10, snapshot_stride=100)
    run_dir = tmp_path / "run"
    assert main(["train", "--config", cfg, "--data", linear_data, "--out", str(run_dir)]) == 0
    assert main(["analyze", "--run", str(run_dir)]) == 0
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["k_sep"] is not None
    assert summary["final_margin"] > 0
    for key in ("growth_fit", "residual_series", "eprime", "claim1", "claim4"):
        assert key in summary
    assert (run_dir / "analysis.csv").read_text().splitlines()[0].startswith("k,")


def test_analyze_without_separation(tmp_path):
    # XOR data cannot be separated by a linear net
    assert main(["gen-data", "xor-ring", "--n", "8", "--out", str(tmp_path)]) == 0
    cfg = write_config(tmp_path / "c.json", iterations=300, snapshot_stride=100)
    data = str(tmp_path / "xor-ring.csv")
    assert main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path / "run")]) == 0
    assert main(["analyze", "--run", str(tmp_path / "run")]) == 0
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["claim1"]["status"] == "not applicable (no separation detected)"


def test_analyze_missing_run(tmp_path):
    assert main(["analyze", "--run", str(tmp_path / "nothing"), "--data", "x.csv"]) == 1


def test_flow_writes_path(tmp_path, linear_data):
    # start from the generator's separating direction, inside the basin of the optimum
    nu = json.loads((tmp_path / "linear.meta.json").read_text())["nu"]
    u0 = ",".join(repr(v) for v in nu)
    assert main(["flow", "--widths", "2,1", "--activation", "linear", "--data", linear_data,
                 "--u0", u0, "--out", str(tmp_path)]) == 0
    header = (tmp_path / "flow.csv").read_text().splitlines()[0]
    assert header == "t,u1,u2,margin,residual"
    info = json.loads((tmp_path / "flow.json").read_text())
    ds = load_csv(linear_data)
    _, m_star = qp_max_margin(ds.X, ds.y)
    assert info["converged"] and abs(info["final_margin"] - m_star) <= 1e-6
    assert main(["flow", "--widths", "2,1", "--activation", "linear", "--data", linear_data,
                 "--u0", "0,1,2"]) == 1


def test_check_grad_passes_and_detects_fault(tmp_path, capsys):
    assert main(["check-grad", "--cases", "50", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")
    assert main(["check-grad", "--cases", "50", "--inject-fault", "--out", str(tmp_path)]) != 0
    assert json.loads((tmp_path / "check_grad.json").read_text())["passed"] is False


def test_check_grad_linear_at_machine_precision(tmp_path):
    assert main(["check-grad", "--widths", "3,1", "--activation", "linear", "--cases", "50",
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "check_grad.json").read_text())
    assert rep["max_euler_error"] <= 1e-14
