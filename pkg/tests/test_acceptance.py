"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]`` or ``[FAIL]`` line with the measured
values. Run ``pytest tests/test_acceptance.py -v`` or execute this file
directly for a plain summary.
"""

from __future__ import annotations

import random
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import pytest

import oracles
from conftest import FIXTURES, build, single_block
from fsbp.cli import main as cli_main
from fsbp.engine import RunConfig, simulate, simulate_many
from fsbp.indicators import analyze_recovery, score_inputs, score_sequence, sequence_violations
from fsbp.metrics import compare, render_comparison
from fsbp.model import FailureProfile
from fsbp.scenarios import list_scenarios, load_scenario, run_scenario


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    capman = _capture_manager()
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)
    assert ok, line


_config = None


def _capture_manager():
    return _config.pluginmanager.getplugin("capturemanager") if _config is not None else None


@pytest.fixture(autouse=True)
def _grab_config(request):
    global _config
    _config = request.config
    yield


def _mean(results, attr: str) -> float:
    return statistics.fmean(getattr(r.blocks[0], attr) for r in results)


def test_ac1_mm1_oracle():
    start = time.perf_counter()
    m = build(single_block(intensity=0.5, service=1.0, horizon=10_000, warmup=500))
    rs = simulate_many(m, [RunConfig(seed=s) for s in range(1, 101)])
    elapsed = time.perf_counter() - start
    o = oracles.mm1(0.5, 1.0)
    util, lq = _mean(rs, "utilization"), _mean(rs, "avg_queue_length")
    w = statistics.fmean(r.avg_time_in_system_days for r in rs)
    ok = (
        abs(util - o["utilization"]) <= 0.03
        and abs(lq - o["lq"]) <= 0.10 * o["lq"]
        and abs(w - o["w"]) <= 0.10 * o["w"]
        and elapsed < 60
    )
    report("AC1 M/M/1 oracle", ok,
           f"utilization {util:.4f} (0.5 +/-0.03), Lq {lq:.4f} (0.5 +/-10%), W {w:.4f} (2 +/-10%), {elapsed:.1f}s")


def test_ac2_erlang_c_oracle():
    m = build(single_block(intensity=2.4, service=1.0, capacity=3, horizon=4000, warmup=200))
    rs = simulate_many(m, [RunConfig(seed=s) for s in range(1, 101)])
    o = oracles.erlang_c(3, 2.4, 1.0)
    parts, ok = [], True
    for key, attr in (("p_wait", "wait_probability"), ("wq", "avg_wait_days")):
        vals = [getattr(r.blocks[0], attr) for r in rs]
        mean = statistics.fmean(vals)
        se = statistics.stdev(vals) / len(vals) ** 0.5
        z = (mean - o[key]) / se
        ok &= abs(z) <= 3
        parts.append(f"{key} {mean:.4f} vs {o[key]:.4f} ({z:+.2f} SE)")
    report("AC2 M/M/3 Erlang-C oracle", ok, ", ".join(parts))


def test_ac3_inputs_plateaus():
    got = [score_inputs(n).value for n in range(1, 13)]
    expected = [0.5, 0.5, 1.0, 1.0, 0.7, 0.7, 0.7, 0.7, 0.2, 0.2, 0.2, 0.2]
    labels = {score_inputs(n).label for n in range(1, 13)}
    ok = got == expected and labels == {"Not appropriate", "Optimal", "Redundant", "Unacceptable"}
    report("AC3 inputs-per-block plateaus", ok, f"n=1..12 -> {got}")


def test_ac4_comparison_formatting():
    base = simulate(build(single_block(horizon=250, warmup=20)))

    def drops(n: int):
        return replace(base, blocks=(replace(base.blocks[0], dropped_timeout=n),))

    text = compare(drops(117), drops(80)).row("Server", "dropped_timeout").text
    same = {r.text for r in compare(base, base).rows}
    sc = load_scenario("product-concept")
    rep = compare(simulate(sc.as_is), simulate(sc.as_will_be))
    removed = [ln for ln in render_comparison(rep).splitlines() if ln.startswith("Choice of target segment")]
    ok = text == "Decreased by 32%" and same == {"Unchanged"} and removed and all("-----" in ln for ln in removed)
    report("AC4 comparison formatting", bool(ok),
           f"117->80 '{text}', identical {sorted(same)}, removed row '{removed[0].split()[-1] if removed else ''}'")


def _checks(report_) -> dict[str, object]:
    return {c.effect.id: c for c in report_.checks}


def test_ac5_product_concept():
    rep = run_scenario("product-concept", seeds=range(1, 51))
    c = _checks(rep)
    t, q, d = c["time-in-system-decreases"], c["queue-length-grows"], c["valuation-drops-decrease"]
    ok = t.passed and t.observed["fraction_of_pairs"] >= 0.9 and q.passed and d.passed
    report(
        "AC5 product-concept re-engineering",
        ok,
        f"time in system {t.observed['before_mean']:.3f}->{t.observed['after_mean']:.3f} "
        f"({t.observed['fraction_of_pairs']:.0%} of pairs lower); mean queue "
        f"{q.observed['before_mean']:.3f}->{q.observed['after_mean']:.3f}; valuation drops "
        f"{d.observed['before_mean']:.1f}->{d.observed['after_mean']:.1f}",
    )


def test_ac6_production_support_sweep():
    rep = run_scenario("production-support", seeds=range(1, 31))
    c = _checks(rep)
    util, frac, drops = (c[k] for k in ("control-load-grows", "fewer-defects-pass", "strict-controls-drop-more"))
    u, f, d = util.observed["means"], frac.observed["means"], drops.observed["means"]
    ok = u[0] < u[1] < u[2] and f[0] > f[1] > f[2] and d[-1] > d[0]
    report(
        "AC6 production-support control sweep",
        ok,
        f"control utilization {[round(x, 3) for x in u]}, defective forwarded {[round(x, 3) for x in f]}, "
        f"timeout drops {[round(x, 1) for x in d]}",
    )


def test_ac7_product_order_failures():
    rep = run_scenario("product-order", seeds=range(1, 51))
    c = _checks(rep)
    t, d = c["failures-slow-requests"], c["failures-drop-more"]
    base = load_scenario("product-order").as_is
    o3 = base.block_by_name("Order processing")
    half = analyze_recovery(base.replace_block(o3.id, failure=FailureProfile(o3.failure.failure_rate_per_day, 0.5,
                                                                             o3.failure.recovery_time_days)),
                            seed=1, replications=50)
    full = analyze_recovery(base.replace_block(o3.id, failure=FailureProfile(o3.failure.failure_rate_per_day, 1.0,
                                                                             o3.failure.recovery_time_days)),
                            seed=1, replications=50)
    d_half = statistics.fmean(half.paired_degradation)
    d_full = statistics.fmean(full.paired_degradation)
    pairs = sum(h <= f for h, f in zip(half.paired_degradation, full.paired_degradation)) / 50
    ok = (t.observed["fraction_of_pairs"] >= 0.95 and d.observed["fraction_of_pairs"] >= 0.95 and d_half <= d_full)
    report(
        "AC7 product-order failure profile",
        ok,
        f"time in system higher in {t.observed['fraction_of_pairs']:.0%} of pairs, drops higher in "
        f"{d.observed['fraction_of_pairs']:.0%}; mean paired degradation severity 0.5 {d_half:.3f} <= "
        f"severity 1.0 {d_full:.3f} (per-pair {pairs:.0%})",
    )


def test_ac8_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("FSBP_OUT_DIR", raising=False)
    blobs = []
    for name in ("first", "second"):
        code = cli_main(["simulate", str(FIXTURES / "mm1.json"), "--seed", "42", "--replications", "5",
                         "--out", str(tmp_path / name), "--format", "json"])
        assert code == 0
        blobs.append((tmp_path / name / "result.json").read_bytes())
    ok = blobs[0] == blobs[1]
    report("AC8 simulate determinism", ok, f"result.json {len(blobs[0])} bytes, identical={ok}")


def test_ac9_conservation():
    rng = random.Random(20240601)
    seeds = [rng.randrange(2**64) for _ in range(10)]
    checked, broken = 0, []
    for sid, _ in list_scenarios():
        sc = load_scenario(sid)
        for model in filter(None, (sc.as_is, sc.as_will_be)):
            for s in seeds:
                for b in simulate(model, RunConfig(seed=s)).blocks:
                    checked += 1
                    lhs = b.arrivals
                    rhs = b.served + b.dropped_timeout + b.dropped_capacity + b.rejected_by_control + b.in_system_end
                    if lhs != rhs:
                        broken.append((sid, model.name, s, b.block_id, lhs, rhs))
    report("AC9 per-block conservation", not broken, f"{checked} block-runs checked, {len(broken)} broken")


def test_ac10_sequence_scoring():
    sc = load_scenario("delivery-of-goods")
    v = sequence_violations(sc.as_is)
    precede = "'Forming the request' must precede 'Assortment planning'" in v
    parallel = [x for x in v if "parallel" in x]
    qc = bool(parallel) and all("Quality control of delivery" in x for x in parallel)
    only_these = all(x in parallel or "must precede" in x for x in v) and sum("must precede" in x for x in v) == 1
    modified = score_sequence(sc.as_will_be).value
    ok = precede and qc and only_these and modified == 1.0
    report("AC10 delivery-of-goods sequence", ok,
           f"original: precede violation={precede}, quality-control parallel violations={len(parallel)}; "
           f"modified score {modified}")


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-q", "-p", "no:cacheprovider"]))
