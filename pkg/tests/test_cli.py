import csv
import json
from importlib import resources

import pytest
from click.testing import CliRunner

from conftest import TOY_PLACEMENTS
from loadshift.cli import main
from loadshift.grid import network_to_dict

jsonschema = pytest.importorskip("jsonschema")
SCHEMA = json.loads(resources.files("loadshift").joinpath("data/summary.schema.json").read_text())


def invoke(*args, code=0):
    res = CliRunner().invoke(main, [str(a) for a in args])
    assert res.exit_code == code, res.output
    lines = [ln for ln in res.stdout.splitlines() if ln.startswith("{")]
    summary = json.loads(lines[-1]) if lines else None
    if summary is not None:
        jsonschema.validate(summary, SCHEMA)
        assert summary["exit_code"] == code
    return summary


@pytest.fixture
def tz_file(tz, tmp_path):
    path = tmp_path / "three_zone.json"
    path.write_text(json.dumps(network_to_dict(*tz)))
    return path


def test_solve_opf_baseline(tz_file, tmp_path):
    out = tmp_path / "opf.json"
    s = invoke("solve-opf", "--network", tz_file, "--out", out)
    assert s["result"]["V_normalized"] == pytest.approx(47.20, abs=1e-9)
    assert s["result"]["lambda"] == pytest.approx([80.0, 60.0, 40.0], abs=1e-9)
    full = json.loads(out.read_text())
    assert full["ledger"]["congestion_rent"] == pytest.approx(12000.0)
    assert s["outputs"] == [str(out)]


def test_solve_opf_shift():
    s = invoke("solve-opf", "--shift", "-48,-48,96")
    assert round(s["result"]["V_normalized"], 2) == 46.05


def test_solve_opf_bad_shift():
    s = invoke("solve-opf", "--shift", "10,0,0", code=1)
    assert "sum to zero" in s["error"]
    invoke("solve-opf", "--shift", "1,2", code=1)
    invoke("solve-opf", "--shift", "a,b,c", code=1)


def test_solve_opf_infeasible(tz, tmp_path):
    data = network_to_dict(*tz)
    for entry in data["loads"]:
        entry["base_mw"] = 3000.0
    path = tmp_path / "overload.json"
    path.write_text(json.dumps(data))
    s = invoke("solve-opf", "--network", path, code=2)
    assert s["result"]["total_load_mw"] > s["result"]["total_capacity_mw"]
    assert s["outputs"] == []


def test_bad_network_file_is_usage_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    invoke("solve-opf", "--network", path, code=1)


def test_click_usage_errors_exit_one():
    for args in (["no-such-command"], ["sweep", "--alpha", "0.5"], ["bilevel", "--alpha", "x"]):
        assert CliRunner().invoke(main, args).exit_code == 1


def test_dump_lp(tmp_path):
    path = tmp_path / "lp.txt"
    invoke("solve-opf", "--dump-lp", path)
    assert path.read_text().strip()
    path2 = tmp_path / "bl.txt"
    invoke("bilevel", "--alpha", "0.25", "--dump-lp", path2)
    assert path2.read_text().strip()


def test_sweep_landscape(tmp_path):
    out = tmp_path / "land.csv"
    s = invoke("sweep", "--alpha", "0.5", "--step", "6", "--out", out)
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["delta_A", "delta_B", "delta_C", "V_norm", "Pi_norm", "active_set_id", "feasible"]
    assert len(rows) == s["result"]["points"] == 1089
    assert s["result"]["argmin_pi"] == [54.0, 96.0, -150.0]
    assert s["result"]["argmin_v"] == [-96.0, -96.0, 192.0]
    assert s["result"]["min_pi_normalized"] == pytest.approx(15.232)
    assert len(s["result"]["active_sets"]) == 3


@pytest.mark.parametrize("args", [("--alpha", "0.5", "--step", "300"), ("--alpha", "0", "--step", "6")])
def test_sweep_single_row(tmp_path, args):
    out = tmp_path / "one.csv"
    invoke("sweep", *args, "--out", out)
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1
    assert [rows[0][k] for k in ("delta_A", "delta_B", "delta_C")] == ["0", "0", "0"]


def test_sweep_dimension_guard(tmp_path):
    s = invoke("sweep", "--alpha", "0.5", "--step", "6", "--out", tmp_path / "x.csv", "--max-free-dim", "1", code=1)
    assert "free dimension" in s["error"]
    assert not (tmp_path / "x.csv").exists()


def test_bilevel_commands(tmp_path):
    s = invoke("bilevel", "--alpha", "0.25")
    assert s["result"]["Pi_normalized"] <= 16.45
    assert s["result"]["Pi_normalized"] == pytest.approx(16.40, abs=1e-6)
    s = invoke("bilevel", "--alpha", "0.5", "--mode", "system")
    assert s["result"]["V_normalized"] <= 44.90
    s = invoke("bilevel", "--alpha", "0")
    assert s["result"]["delta"] == [0.0, 0.0, 0.0]
    s = invoke("bilevel", "--alpha", "0.5", "--tie-break", "max_v")
    assert s["result"]["delta"] == pytest.approx([50.0, 100.0, -150.0], abs=1e-4)


def test_bilevel_usage_errors():
    invoke("bilevel", "--alpha", "0.5", "--parallel", code=1)
    invoke("bilevel", "--alpha", "1.5", code=1)


def test_bilevel_budget_exit_three(tmp_path):
    out = tmp_path / "incumbent.json"
    s = invoke("bilevel", "--alpha", "0.5", "--node-budget", "1", "--out", out, code=3)
    assert s["status"] == "budget_exhausted"
    assert json.loads(out.read_text())["status"] == "budget_exhausted"


def test_bilevel_infeasible_exit_two(tz, tmp_path):
    data = network_to_dict(*tz)
    data["generators"] = data["generators"][:1]
    path = tmp_path / "short.json"
    path.write_text(json.dumps(data))
    invoke("bilevel", "--network", path, "--alpha", "0.5", code=2)


def test_reruns_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        invoke("solve-opf", "--shift", "54,96,-150", "--out", d / "opf.json")
        invoke("sweep", "--alpha", "0.25", "--step", "25", "--out", d / "sweep.csv")
        invoke("bilevel", "--alpha", "0.5", "--tie-break", "max_v", "--out", d / "bl.json")
    for f in ("opf.json", "sweep.csv", "bl.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_tolerance_flags():
    s = invoke("--feas-tol", "1e-8", "--duality-tol", "1e-7", "solve-opf")
    assert s["result"]["V_normalized"] == pytest.approx(47.20)


def test_run_and_report_three_zone(tz_file, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"alphas": [0.0, 0.5], "modes": ["consumer"]}))
    run_dir = tmp_path / "run"
    s = invoke("run", "--dataset", tz_file, "--config", cfg, "--out", run_dir)
    assert s["result"]["written"] == 3
    first = (run_dir / "results.jsonl").read_bytes()
    s = invoke("run", "--dataset", tz_file, "--config", cfg, "--out", run_dir)
    assert s["result"]["written"] == 0
    assert (run_dir / "results.jsonl").read_bytes() == first
    assert json.loads((run_dir / "config.json").read_text())["alphas"] == [0.0, 0.5]

    merit = tmp_path / "merit.csv"
    s = invoke("report", "--dataset", tz_file, "--config", cfg, "--out", run_dir, "--merit-order", merit)
    rows = list(csv.DictReader((run_dir / "report.csv").open()))
    half = [r for r in rows if r["alpha"] == "0.5"]
    assert half and all(r["misalign_pct"] == "100.000000" for r in half)
    assert s["result"]["merit_order"]["alpha"] == 0.5
    assert {r["generator_id"] for r in csv.DictReader(merit.open())} == {"A1", "B1", "C1", "C2"}

    # alpha 0 is identical to no shift: every merit-order change is zero
    zero = tmp_path / "zero.csv"
    invoke("report", "--dataset", tz_file, "--config", cfg, "--out", run_dir, "--merit-order", zero, "--alpha", "0")
    for r in csv.DictReader(zero.open()):
        assert int(r["delta_marginal_hours"]) == 0 and float(r["delta_energy_mwh"]) == 0.0


def test_report_without_records(tz_file, tmp_path):
    invoke("report", "--dataset", tz_file, "--out", tmp_path / "empty", code=1)


def test_run_config_errors(tz_file, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"alphas": [0.5], "placements": [["Z", 10]]}))
    invoke("run", "--dataset", tz_file, "--config", cfg, "--out", tmp_path / "r", code=1)
    cfg.write_text(json.dumps({"alphas": [0.5], "hours": [0, 5]}))
    invoke("run", "--dataset", tz_file, "--config", cfg, "--out", tmp_path / "r", code=1)
    cfg.write_text(json.dumps({"alphas": [0.5], "bogus": 1}))
    invoke("run", "--dataset", tz_file, "--config", cfg, "--out", tmp_path / "r", code=1)


def test_run_toy_rts_with_workers(toy_rts, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"alphas": [0.5], "modes": ["consumer"], "placements": TOY_PLACEMENTS, "hours": [0, 4]}))
    monkeypatch.setenv("LOADSHIFT_WORKERS", "2")
    s = invoke("run", "--dataset", toy_rts, "--config", cfg, "--out", tmp_path / "p")
    assert s["result"]["written"] == 8
    invoke("run", "--dataset", toy_rts, "--config", cfg, "--out", tmp_path / "s", "--workers", "1")
    assert (tmp_path / "p" / "results.jsonl").read_bytes() == (tmp_path / "s" / "results.jsonl").read_bytes()
    s = invoke("report", "--dataset", toy_rts, "--config", cfg, "--out", tmp_path / "p")
    assert s["result"]["scenarios"][0]["solved_hours"] == 4
