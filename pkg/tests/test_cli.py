import csv
import math

import numpy as np
import pytest

from conftest import ROOT, make_config
from tarc_lab import cli
from tarc_lab import config as C
from tarc_lab.experiment import worker_count
from tarc_lab.reports import read_trace_csv
from tarc_lab.simulator import compute_metrics
from tarc_lab.stability import certify

SCALAR = ROOT / "configs" / "scalar.yaml"


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(C.dumps(cfg))
    return str(path)


def short_cfg(tmp_path, **dotted):
    dotted.setdefault("sim__duration", 0.3)
    return write_cfg(tmp_path, make_config(**dotted))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def kv_lines(text):
    out = {}
    for line in text.splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k.strip()] = v.strip()
    return out


# --- check-gains ---------------------------------------------------------------------------


def test_check_gains_feasible_scalar(capsys):
    assert cli.main(["check-gains", "--config", str(SCALAR)]) == 0
    out = kv_lines(capsys.readouterr().out)
    assert out["psi.feasible"] == "true"
    assert float(out["psi.lambda_min"]) > 0
    assert out["config_hash"] == C.load(SCALAR).config_hash


def test_check_gains_long_delay_infeasible(tmp_path, capsys):
    cfg = C.load(SCALAR)
    cfg = cfg.with_value("sim.dt", 0.01).with_value("sim.duration", 100.0).with_value("controller.h_lag", 1000)
    assert cli.main(["check-gains", "--config", write_cfg(tmp_path, cfg)]) == 2
    out = kv_lines(capsys.readouterr().out)
    assert float(out["h"]) == pytest.approx(10.0)
    assert out["verdict"].startswith("infeasible")


def test_check_gains_filtered_reports_theta(tmp_path, capsys):
    assert cli.main(["check-gains", "--config", short_cfg(tmp_path)]) == 2
    out = kv_lines(capsys.readouterr().out)
    assert "theta.lambda_min" in out and out["verdict"] == "infeasible (theta)"


def test_unknown_key_exits_one_and_names_it(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(SCALAR.read_text().replace("duration:", "durration:"))
    assert cli.main(["check-gains", "--config", str(path)]) == 1
    assert "sim.durration" in capsys.readouterr().err


def test_malformed_yaml_exits_one(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("controller: {K1: 4\n")
    assert cli.main(["check-gains", "--config", str(path)]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_file_exits_one(tmp_path):
    assert cli.main(["check-gains", "--config", str(tmp_path / "none.yaml")]) == 1


# --- max-delay -----------------------------------------------------------------------------


def test_max_delay_agrees_with_grid_scan(capsys):
    assert cli.main(["max-delay", "--config", str(SCALAR)]) == 0
    out = kv_lines(capsys.readouterr().out)
    h_star = float(out["h_star"])
    lo, hi = (float(x) for x in out["bracket"].split())
    assert lo <= h_star <= hi

    cfg = C.load(SCALAR)
    gains, base = C.build_gains(cfg), C.build_stability_params(cfg)
    step = 1e-4
    grid = np.arange(1, 2001) * step
    feasible = [certify(gains, type(base)(base.beta, base.xi, base.D, base.Q, h)).feasible for h in grid]
    last = grid[np.flatnonzero(feasible)[-1]]
    # the feasible set is an interval starting at 0
    assert all(feasible[: np.flatnonzero(feasible)[-1] + 1])
    assert last <= h_star <= last + step


def test_max_delay_never_feasible_exits_two(tmp_path, capsys):
    cfg = C.load(SCALAR).with_value("stability.beta", 1.0)
    assert cli.main(["max-delay", "--config", write_cfg(tmp_path, cfg)]) == 2
    assert capsys.readouterr().out.startswith("infeasible")


# --- simulate ------------------------------------------------------------------------------


def test_simulate_writes_trace_and_metrics(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["simulate", "--config", short_cfg(tmp_path), "--out", str(out)]) == 0
    with open(out / "trace.csv") as fh:
        header = fh.readline().strip().split(",")
    n = 2
    assert len(header) == 1 + 5 * n + 2
    rows = read_rows(out / "metrics.csv")
    assert len(rows) == 1 and rows[0]["strategy"] == "TARC"
    assert rows[0]["tau_jump_ok"] == "true"


def test_simulate_is_byte_identical(tmp_path):
    cfg = short_cfg(tmp_path)
    for d in ("a", "b"):
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    for name in ("trace.csv", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_seed_override_changes_output(tmp_path):
    cfg = short_cfg(tmp_path)
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() != (tmp_path / "b" / "trace.csv").read_bytes()


def test_record_every_row_count(tmp_path):
    out = tmp_path / "run"
    cfg = short_cfg(tmp_path, sim__duration=0.5, sim__record_every=10)
    assert cli.main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "trace.csv") as fh:
        lines = fh.read().splitlines()
    assert len(lines) - 1 == math.floor(0.5 / 1e-3 / 10) + 1


def test_trace_read_back_reproduces_metrics(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["simulate", "--config", short_cfg(tmp_path), "--out", str(out)]) == 0
    row = read_rows(out / "metrics.csv")[0]
    tr = read_trace_csv(out / "trace.csv", warmup_time=float(row["warmup_time"]))
    m = compute_metrics(tr)
    for name, value in m.as_row().items():
        assert row[name] == cli.fmt(value), name


def test_simulate_divergence_exits_one(tmp_path, capsys):
    cfg = short_cfg(tmp_path, controller__strategy="TDC", controller__mhat_scale=5.0, sim__duration=2.0)
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
    assert "diverged" in capsys.readouterr().err
    rows = read_rows(tmp_path / "run" / "metrics.csv")
    assert rows[0]["diverged"] == "true" and rows[0]["diverged_step"]


# --- compare and sweep ---------------------------------------------------------------------


def test_compare_keeps_given_order(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["compare", "--config", short_cfg(tmp_path), "--out", str(out), "--strategies", "TDC,TARC"]) == 0
    rows = read_rows(out / "compare.csv")
    assert [r["strategy"] for r in rows] == ["TDC", "TARC"]
    assert rows[0]["cert_kind"] == "TDC" and rows[1]["cert_kind"] == "FTDC"


def test_compare_unknown_strategy(tmp_path, capsys):
    assert cli.main(["compare", "--config", short_cfg(tmp_path), "--out", str(tmp_path),
                     "--strategies", "TDC,PID"]) == 1
    assert "PID" in capsys.readouterr().err


def test_sweep_rows_in_order(tmp_path, monkeypatch):
    monkeypatch.setenv("TARC_LAB_THREADS", "1")
    out = tmp_path / "run"
    cfg = short_cfg(tmp_path, sim__duration=0.2)
    assert cli.main(["sweep", "--config", cfg, "--out", str(out), "controller.h_lag", "1", "2", "4"]) == 0
    rows = read_rows(out / "sweep.csv")
    assert [r["value"] for r in rows] == ["1", "2", "4"]
    assert len({r["config_hash"] for r in rows}) == 3
    assert cli.main(["sweep", "--config", cfg, "--out", str(out), "--strategies", "TDC,TARC",
                     "controller.alpha", "1.5", "3"]) == 0
    rows = read_rows(out / "sweep.csv")
    assert [(r["value"], r["strategy"]) for r in rows] == [("1.5", "TDC"), ("1.5", "TARC"), ("3", "TDC"), ("3", "TARC")]


def test_sweep_parallel_matches_serial(tmp_path, monkeypatch):
    cfg = short_cfg(tmp_path, sim__duration=0.2)
    outs = []
    for threads in ("1", "2"):
        monkeypatch.setenv("TARC_LAB_THREADS", threads)
        out = tmp_path / f"t{threads}"
        assert cli.main(["sweep", "--config", cfg, "--out", str(out), "controller.h_lag", "1", "2"]) == 0
        outs.append((out / "sweep.csv").read_bytes())
    assert outs[0] == outs[1]


@pytest.mark.parametrize("argv, needle", [
    (["controller.h_lag"], "at least one value"),
    (["controller.nope", "1"], "controller.nope"),
    (["controller.strategy", "1"], "numeric"),
    (["controller.h_lag", "x"], "not a number"),
    (["controller.h_lag", "0"], "controller.h_lag"),
])
def test_sweep_errors(tmp_path, capsys, argv, needle):
    assert cli.main(["sweep", "--config", short_cfg(tmp_path), "--out", str(tmp_path)] + argv) == 1
    assert needle in capsys.readouterr().err


def test_worker_count(monkeypatch):
    monkeypatch.setenv("TARC_LAB_THREADS", "3")
    assert worker_count(10) == 3
    assert worker_count(2) == 2
    assert worker_count(10, requested=1) == 1
    monkeypatch.delenv("TARC_LAB_THREADS")
    assert 1 <= worker_count(100) <= 100
