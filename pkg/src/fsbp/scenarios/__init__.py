"""The four shipped experiments as ready-to-run model files.

Each scenario names an ``as_is`` model, optionally an ``as_will_be`` model
and the edit script that produces it, and a list of directional effects
that the before/after runs should show. Parameters the source material
does not publish carry a ``not in paper`` note in the model files.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Literal, Sequence

from fsbp import schemas
from fsbp.engine import RunConfig, simulate_many
from fsbp.indicators import FSAssessment, assess, with_strictness, without_failures
from fsbp.metrics import AggregateResult, ComparisonReport, RunResult, aggregate, compare
from fsbp.model import EditScript, ProcessModel, edit_from_dict, model_from_dict


class UnknownScenarioError(KeyError):
    def __str__(self) -> str:
        return f"unknown scenario {self.args[0]!r}"


@dataclass(frozen=True)
class ExpectedEffect:
    id: str
    description: str
    comparison: Literal["reengineering", "failure", "control_sweep"]
    metric: str
    block: str | None
    direction: Literal["increase", "decrease"]
    mode: Literal["pairs", "mean", "monotone", "endpoints"]
    min_fraction: float = 1.0


@dataclass(frozen=True)
class Scenario:
    id: str
    description: str
    models: dict[str, ProcessModel | None]
    edit: EditScript | None
    seeds: tuple[int, ...]
    grid: tuple[float, ...]
    expected_effects: tuple[ExpectedEffect, ...]

    @property
    def as_is(self) -> ProcessModel:
        return self.models["as_is"]

    @property
    def as_will_be(self) -> ProcessModel | None:
        return self.models.get("as_will_be")


def _read(name: str) -> str:
    return resources.files(__package__).joinpath(name).read_text("utf-8")


@lru_cache(maxsize=None)
def _manifest() -> dict[str, Any]:
    doc = json.loads(_read("manifest.json"))
    schemas.check("scenario_manifest", doc)
    return doc


def scenario_file_names() -> list[str]:
    names = []
    for entry in _manifest()["scenarios"]:
        names += [f for f in entry["models"].values() if f]
        if entry.get("edit"):
            names.append(entry["edit"])
    return names


def read_scenario_file(name: str) -> str:
    return _read(name)


def list_scenarios() -> list[tuple[str, str]]:
    return [(e["id"], e["description"]) for e in _manifest()["scenarios"]]


def load_scenario(scenario_id: str) -> Scenario:
    for entry in _manifest()["scenarios"]:
        if entry["id"] == scenario_id:
            break
    else:
        raise UnknownScenarioError(scenario_id)
    models = {
        key: None if fname is None else model_from_dict(json.loads(_read(fname)))
        for key, fname in entry["models"].items()
    }
    edit = None if entry.get("edit") is None else edit_from_dict(json.loads(_read(entry["edit"])))
    run = entry.get("run", {})
    return Scenario(
        id=entry["id"],
        description=entry["description"],
        models=models,
        edit=edit,
        seeds=tuple(range(1, int(run.get("seeds", 30)) + 1)),
        grid=tuple(run.get("grid", ())),
        expected_effects=tuple(ExpectedEffect(**e) for e in entry["expected_effects"]),
    )


# ---------------------------------------------------------------------------
# effect metrics


def _control_names(model: ProcessModel) -> list[str]:
    return [b.name for b in model.control_blocks()]


def metric_value(
    result: RunResult,
    metric: str,
    block: str | None = None,
    *,
    blocks: Sequence[str] | None = None,
) -> float:
    """Scalar metric of one run.

    ``blocks`` restricts the block-averaged metrics (mean queue length,
    control utilization, defective forwarded fraction) to those block names.
    """
    if block is not None:
        return float(getattr(result.block(block), metric))
    chosen = [b for b in result.blocks if blocks is None or b.name in blocks]
    if metric == "avg_time_in_system_days":
        return result.avg_time_in_system_days
    if metric == "dropped_timeout_total":
        return float(sum(b.dropped_timeout for b in result.blocks))
    if metric == "mean_queue_length":
        return statistics.fmean(b.avg_queue_length for b in chosen)
    if metric == "control_utilization":
        return statistics.fmean(b.utilization for b in chosen)
    if metric == "defective_forwarded_fraction":
        passed = sum(b.forwarded_defective for b in chosen)
        checked = passed + sum(b.rejected_by_control for b in chosen)
        return passed / checked if checked else 0.0
    raise KeyError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class EffectCheck:
    effect: ExpectedEffect
    status: Literal["pass", "fail", "skipped"]
    observed: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict[str, Any]:
        return {"effect": asdict(self.effect), "status": self.status, "observed": self.observed}


def _better(direction: str, before: float, after: float) -> bool:
    return after > before if direction == "increase" else after < before


def check_paired(effect: ExpectedEffect, before: Sequence[float], after: Sequence[float]) -> EffectCheck:
    mb, ma = statistics.fmean(before), statistics.fmean(after)
    fraction = sum(_better(effect.direction, b, a) for b, a in zip(before, after)) / len(before)
    if effect.mode == "pairs":
        ok = fraction >= effect.min_fraction
    else:
        ok = _better(effect.direction, mb, ma)
    observed = {
        "before_mean": mb,
        "after_mean": ma,
        "delta_percent": None if mb == 0 else (ma - mb) / mb * 100.0,
        "fraction_of_pairs": fraction,
        "n": len(before),
    }
    return EffectCheck(effect, "pass" if ok else "fail", observed)


def check_sweep(effect: ExpectedEffect, grid: Sequence[float], means: Sequence[float]) -> EffectCheck:
    if effect.mode == "monotone":
        ok = all(_better(effect.direction, a, b) for a, b in zip(means, means[1:]))
    else:
        ok = _better(effect.direction, means[0], means[-1])
    return EffectCheck(effect, "pass" if ok else "fail", {"grid": list(grid), "means": list(means)})


# ---------------------------------------------------------------------------
# running


@dataclass(frozen=True)
class ScenarioReport:
    scenario_id: str
    seeds: tuple[int, ...]
    before: AggregateResult
    after: AggregateResult | None
    comparison: ComparisonReport | None
    assessments: dict[str, FSAssessment]
    checks: tuple[EffectCheck, ...]
    sweep: dict[str, Any] | None = None

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "scenario_report",
            "scenario_id": self.scenario_id,
            "seeds": list(self.seeds),
            "passed": self.passed,
            "before": self.before.to_dict(),
            "after": None if self.after is None else self.after.to_dict(),
            "comparison": None if self.comparison is None else self.comparison.to_dict(),
            "assessments": {k: v.to_dict() for k, v in self.assessments.items()},
            "checks": [c.to_dict() for c in self.checks],
            "sweep": self.sweep,
        }


def _configs(seeds: Sequence[int]) -> list[RunConfig]:
    return [RunConfig(seed=s) for s in seeds]


def run_scenario(
    scenario_id: str,
    seeds: Sequence[int] | None = None,
    *,
    failures: bool = True,
    n_jobs: int = 1,
) -> ScenarioReport:
    """Run a scenario's paired replications and check its expected effects.

    Pairs share a seed, so before and after runs see common random numbers.
    With ``failures=False`` failure profiles are stripped and failure effects
    are skipped.
    """
    sc = load_scenario(scenario_id)
    seeds = tuple(seeds) if seeds is not None else sc.seeds
    if not seeds:
        raise ValueError("need at least one seed")
    configs = _configs(seeds)
    as_is = sc.as_is if failures else without_failures(sc.as_is)

    cache: dict[str, list[RunResult]] = {}

    def runs(key: str, model: ProcessModel) -> list[RunResult]:
        if key not in cache:
            cache[key] = simulate_many(model, configs, n_jobs)
        return cache[key]

    before = runs("as_is", as_is)
    after = None
    comparison = None
    assessments = {"as_is": assess(as_is)}
    if sc.as_will_be is not None:
        after = runs("as_will_be", sc.as_will_be)
        comparison = compare(aggregate(before), aggregate(after))
        assessments["as_will_be"] = assess(sc.as_will_be)

    sweep = None
    checks = []
    for effect in sc.expected_effects:
        if effect.comparison == "reengineering":
            if after is None:
                checks.append(EffectCheck(effect, "skipped", {"reason": "no as-will-be model"}))
                continue
            common = [b.name for b in sc.as_will_be.blocks if b.name in {x.name for x in as_is.blocks}]
            b_vals = [metric_value(r, effect.metric, effect.block, blocks=common) for r in before]
            a_vals = [metric_value(r, effect.metric, effect.block, blocks=common) for r in after]
            checks.append(check_paired(effect, b_vals, a_vals))
        elif effect.comparison == "failure":
            if not failures or not any(b.failure for b in sc.as_is.blocks):
                checks.append(EffectCheck(effect, "skipped", {"reason": "failures disabled"}))
                continue
            base = runs("no_failures", without_failures(sc.as_is))
            b_vals = [metric_value(r, effect.metric, effect.block) for r in base]
            a_vals = [metric_value(r, effect.metric, effect.block) for r in before]
            checks.append(check_paired(effect, b_vals, a_vals))
        elif effect.comparison == "control_sweep":
            grid = sc.grid
            names = _control_names(as_is)
            ids = [b.id for b in as_is.control_blocks()]
            means = []
            for g in grid:
                rs = runs(f"strictness={g}", with_strictness(as_is, {i: g for i in ids}))
                means.append(statistics.fmean(metric_value(r, effect.metric, effect.block, blocks=names) for r in rs))
            checks.append(check_sweep(effect, grid, means))
            sweep = sweep or {"grid": list(grid), "blocks": ids}
            sweep.setdefault("metrics", {})[effect.metric] = means
        else:
            raise ValueError(f"unknown comparison {effect.comparison!r}")

    return ScenarioReport(
        scenario_id=sc.id,
        seeds=seeds,
        before=aggregate(before),
        after=None if after is None else aggregate(after),
        comparison=comparison,
        assessments=assessments,
        checks=tuple(checks),
        sweep=sweep,
    )


def render_checklist(report: ScenarioReport) -> str:
    lines = [f"Scenario {report.scenario_id} ({len(report.seeds)} seeds)"]
    for c in report.checks:
        mark = {"pass": "PASS", "fail": "FAIL", "skipped": "SKIP"}[c.status]
        detail = ""
        obs = c.observed
        if "before_mean" in obs:
            detail = f"before {obs['before_mean']:.4g}, after {obs['after_mean']:.4g}"
            if c.effect.mode == "pairs":
                detail += f", {obs['fraction_of_pairs']:.0%} of pairs"
        elif "means" in obs:
            detail = ", ".join(f"{g}: {m:.4g}" for g, m in zip(obs["grid"], obs["means"]))
        elif "reason" in obs:
            detail = obs["reason"]
        lines.append(f"[{mark}] {c.effect.description} ({detail})")
    return "\n".join(lines) + "\n"
