from __future__ import annotations

import csv
import json
import shutil
from pathlib import Path

import pytest

from conftest import FIXTURES, HERE, SCENARIO_DIR, single_block
from fsbp import schemas
from fsbp.cli import main

GOLDEN = HERE / "golden"


def run(capsys, *argv: str) -> tuple[int, str, str]:
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(autouse=True)
def _no_env_out(monkeypatch):
    monkeypatch.delenv("FSBP_OUT_DIR", raising=False)


# -- validate ----------------------------------------------------------------------------------


def test_validate_scenario_model(capsys):
    code, out, _ = run(capsys, "validate", str(SCENARIO_DIR / "product-concept-as-is.json"))
    assert code == 0 and "valid" in out


def test_validate_dangling_route(tmp_path, capsys):
    doc = single_block()
    doc["routes"].append({"from": "q", "to": "b9"})
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    code, _, err = run(capsys, "validate", str(p))
    assert code == 1
    assert "b9" in err


def test_validate_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "validate", str(tmp_path / "nope.json"))
    assert code == 2 and "nope.json" in err


def test_validate_warning_still_ok(tmp_path, capsys):
    doc = single_block()
    doc["blocks"].append({"id": "x", "name": "X", "service_time_days": 1.0, "capacity": 1, "timeout_days": None})
    p = tmp_path / "warn.json"
    p.write_text(json.dumps(doc))
    code, out, err = run(capsys, "validate", str(p), "--format", "json")
    assert code == 0 and "warning" in err
    doc = json.loads(out)
    schemas.check("diagnostics", doc)
    assert doc["valid"] is True


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["simulate", str(FIXTURES / "mm1.json"), "--no-such-flag"]) == 2
    assert main(["simulate", str(FIXTURES / "mm1.json"), "--format", "xml"]) == 2
    capsys.readouterr()


# -- simulate ------------------------------------------------------------------------------------


def test_simulate_golden(tmp_path, capsys):
    out_dir = tmp_path / "out"
    code, stdout, _ = run(capsys, "simulate", str(FIXTURES / "mm1.json"), "--seed", "42", "--replications", "1",
                          "--out", str(out_dir))
    assert code == 0
    assert (out_dir / "result.json").read_bytes() == (GOLDEN / "mm1_seed42.result.json").read_bytes()
    assert (out_dir / "series" / "q.csv").read_bytes() == (GOLDEN / "mm1_seed42.q.csv").read_bytes()
    assert (out_dir / "queue_length.svg").exists()
    assert stdout.startswith("# fsbp") and "seed=42" in stdout and "replications=1" in stdout
    for metric in ("Avg queue", "Dropped (timeout)", "Utilization", "Average time in system"):
        assert metric in stdout


def test_simulate_byte_identical_twice(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["simulate", str(FIXTURES / "mm1.json"), "--seed", "7", "--replications", "3",
                     "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    for f in ("result.json", "series/q.csv", "queue_length.svg", "report.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_replications_aggregate(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", str(FIXTURES / "mm1.json"), "--replications", "100", "--horizon", "300",
                       "--out", str(tmp_path), "--format", "json")
    assert code == 0
    doc = json.loads(out)
    schemas.check("aggregate", doc)
    assert doc["n"] == 100
    u = doc["blocks"][0]["metrics"]["utilization"]
    assert u["ci_low"] <= u["mean"] <= u["ci_high"] and u["ci_low"] < u["ci_high"]
    assert json.loads((tmp_path / "result.json").read_text()) == doc


def test_simulate_default_header(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, out, _ = run(capsys, "simulate", str(FIXTURES / "mm1.json"), "--horizon", "150")
    assert code == 0
    assert "seed=1" in out and "replications=30" in out and "out=out" in out
    assert (tmp_path / "out" / "result.json").exists()


def test_simulate_run_result_schema(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", str(FIXTURES / "mm1.json"), "--replications", "1", "--format", "json",
                       "--out", str(tmp_path))
    assert code == 0
    schemas.check("run_result", json.loads(out))


def test_simulate_csv_format(tmp_path, capsys):
    code, out, err = run(capsys, "simulate", str(FIXTURES / "mm1.json"), "--replications", "1", "--format", "csv",
                         "--out", str(tmp_path))
    assert code == 0 and err.startswith("# fsbp")
    rows = list(csv.reader(out.splitlines()))
    assert rows[0][0] == "block_id" and rows[1][0] == "q"


def test_simulate_invalid_model(tmp_path, capsys):
    doc = single_block(horizon=10, warmup=10)
    p = tmp_path / "m.json"
    p.write_text(json.dumps(doc))
    code, _, err = run(capsys, "simulate", str(p), "--out", str(tmp_path))
    assert code == 1 and "error" in err


def test_env_overrides_out(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("FSBP_OUT_DIR", str(tmp_path / "env"))
    assert main(["simulate", str(FIXTURES / "mm1.json"), "--replications", "1", "--out", str(tmp_path / "flag")]) == 0
    capsys.readouterr()
    assert (tmp_path / "env" / "result.json").exists()
    assert not (tmp_path / "flag").exists()


def test_unwritable_out_is_io_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "simulate", str(FIXTURES / "mm1.json"), "--replications", "1", "--out", str(blocker))
    assert code == 2 and str(blocker) in err


# -- compare ---------------------------------------------------------------------------------------


def _result_file(tmp_path: Path, name: str, drops: int) -> Path:
    doc = json.loads((GOLDEN / "mm1_seed42.result.json").read_text())
    doc["blocks"][0]["dropped_timeout"] = drops
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_compare_117_to_80(tmp_path, capsys):
    before, after = _result_file(tmp_path, "b.json", 117), _result_file(tmp_path, "a.json", 80)
    code, out, _ = run(capsys, "compare", str(before), str(after), "--out", str(tmp_path / "o"))
    assert code == 0
    assert "Decreased by 32%" in out
    doc = json.loads((tmp_path / "o" / "comparison.json").read_text())
    schemas.check("comparison", doc)


def test_compare_identical_unchanged(tmp_path, capsys):
    p = GOLDEN / "mm1_seed42.result.json"
    code, out, _ = run(capsys, "compare", str(p), str(p), "--format", "json", "--out", str(tmp_path))
    assert code == 0
    assert {r["text"] for r in json.loads(out)["rows"]} == {"Unchanged"}


def test_compare_removed_block_dashes(tmp_path, capsys):
    for model, name in (("product-concept-as-is.json", "before"), ("product-concept-as-will-be.json", "after")):
        assert main(["simulate", str(SCENARIO_DIR / model), "--replications", "1", "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    code, out, _ = run(capsys, "compare", str(tmp_path / "before" / "result.json"),
                       str(tmp_path / "after" / "result.json"), "--out", str(tmp_path / "cmp"))
    assert code == 0
    line = next(ln for ln in out.splitlines() if ln.startswith("Choice of target segment"))
    assert "-----" in line


def test_compare_horizon_mismatch(tmp_path, capsys):
    a = _result_file(tmp_path, "a.json", 1)
    doc = json.loads(a.read_text())
    doc["horizon_days"] = 2000
    b = tmp_path / "b.json"
    b.write_text(json.dumps(doc))
    code, _, err = run(capsys, "compare", str(a), str(b), "--out", str(tmp_path))
    assert code == 1 and "horizon" in err


def test_compare_bad_input(tmp_path, capsys):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    assert main(["compare", str(p), str(p), "--out", str(tmp_path)]) == 2
    assert main(["compare", str(tmp_path / "missing.json"), str(p)]) == 2
    capsys.readouterr()


# -- assess ------------------------------------------------------------------------------------------


def test_assess_product_concept(tmp_path, capsys):
    code, out, _ = run(capsys, "assess", str(SCENARIO_DIR / "product-concept-as-is.json"), "--format", "json",
                       "--out", str(tmp_path))
    assert code == 0
    doc = json.loads(out)
    schemas.check("assessment", doc)
    scores = {s["name"]: s["value"] for s in doc["S"]}
    assert scores == {"inputs_per_block": 0.7, "block_count": 1.0}
    assert doc["L"] == []


def test_assess_missing_legal_file(tmp_path, capsys):
    code, _, err = run(capsys, "assess", str(FIXTURES / "mm1.json"), "--legal", str(tmp_path / "none.json"),
                       "--out", str(tmp_path))
    assert code == 0 and "not found" in err
    doc = json.loads((tmp_path / "assessment.json").read_text())
    assert doc["L"] == [] and any("not found" in n for n in doc["notes"])


def test_assess_legal_file(tmp_path, capsys):
    legal = tmp_path / "legal.json"
    legal.write_text(json.dumps([{"name": "licensing", "value": 1.0, "label": "Optimal"}]))
    code, out, _ = run(capsys, "assess", str(FIXTURES / "mm1.json"), "--legal", str(legal), "--format", "json",
                       "--out", str(tmp_path))
    assert code == 0
    assert json.loads(out)["L"][0]["provenance"] == "external"


def test_assess_sequence_and_runs(tmp_path, capsys):
    code, out, _ = run(capsys, "assess", str(SCENARIO_DIR / "product-order.json"), "--runs", "2", "--format", "json",
                       "--out", str(tmp_path))
    assert code == 0
    assert [s["name"] for s in json.loads(out)["O"]] == ["recovery_time"]


# -- sweep ---------------------------------------------------------------------------------------------


def _short_support(tmp_path: Path) -> Path:
    doc = json.loads((SCENARIO_DIR / "production-support.json").read_text())
    doc["horizon_days"] = 120
    p = tmp_path / "support.json"
    p.write_text(json.dumps(doc))
    return p


def test_sweep_outputs(tmp_path, capsys):
    model = _short_support(tmp_path)
    code, out, _ = run(capsys, "sweep", str(model), "--blocks", "c2", "--grid", "0.1,0.5,0.9", "--runs", "3",
                       "--out", str(tmp_path / "o"))
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "o" / "sweep.csv").read_text().splitlines()))
    assert len(rows) == 3
    utils = [float(r["utilization"]) for r in rows]
    assert utils == sorted(utils)
    assert sum(r["is_best"] == "True" for r in rows) == 1
    assert "*" in out and "best:" in out
    schemas.check("sweep", json.loads((tmp_path / "o" / "sweep.json").read_text()))


def test_sweep_singleton_grid(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", str(_short_support(tmp_path)), "--blocks", "c4", "--grid", "0.5", "--runs",
                       "2", "--format", "json", "--out", str(tmp_path))
    assert code == 0
    doc = json.loads(out)
    assert len(doc["rows"]) == 1 and doc["best"] == {"c4": 0.5}


def test_sweep_bad_grid(tmp_path, capsys):
    model = _short_support(tmp_path)
    assert main(["sweep", str(model), "--grid", "0.1,abc", "--out", str(tmp_path)]) == 2
    assert main(["sweep", str(model), "--grid", "1.5", "--runs", "1", "--out", str(tmp_path)]) == 1
    assert main(["sweep", str(model), "--blocks", "zz", "--runs", "1", "--out", str(tmp_path)]) == 1
    capsys.readouterr()


# -- scenario ----------------------------------------------------------------------------------------


def test_scenario_list(capsys):
    code, out, _ = run(capsys, "scenario", "--list", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    schemas.check("scenario_list", doc)
    assert {s["id"] for s in doc["scenarios"]} >= {"product-concept", "production-support", "delivery-of-goods",
                                                  "product-order"}


def test_scenario_unknown(tmp_path, capsys):
    code, _, err = run(capsys, "scenario", "nope", "--out", str(tmp_path))
    assert code == 1 and "nope" in err


def test_scenario_run_writes_report(tmp_path, capsys):
    code, out, _ = run(capsys, "scenario", "product-order", "--seeds", "1-3", "--no-failures", "--out", str(tmp_path))
    assert code == 0
    assert "SKIP" in (tmp_path / "checklist.txt").read_text()
    doc = json.loads((tmp_path / "report.json").read_text())
    schemas.check("scenario_report", doc)
    assert doc["seeds"] == [1, 2, 3]
    assert "replications=3" in out


def test_scenario_json_stdout(tmp_path, capsys):
    code, out, _ = run(capsys, "scenario", "delivery-of-goods", "--seeds", "1,2", "--format", "json",
                       "--out", str(tmp_path))
    assert code in (0, 1)
    schemas.check("scenario_report", json.loads(out))


def test_scenario_bad_seeds(tmp_path, capsys):
    assert main(["scenario", "product-order", "--seeds", "a-b", "--out", str(tmp_path)]) == 2
    capsys.readouterr()


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    exe = shutil.which("fsbp")
    cmd = [exe] if exe else [sys.executable, "-m", "fsbp.cli"]
    proc = subprocess.run([*cmd, "validate", str(FIXTURES / "mm1.json")], capture_output=True, text=True)
    assert proc.returncode == 0
