"""Functional-stability indicators and their assembly into the (S, O, L) triple.

S holds structural scores computed from the model graph, O holds
organizational scores that need simulation runs, and L holds legal scores
supplied from outside and passed through untouched.
"""

from __future__ import annotations

import itertools
import statistics
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from fsbp.engine import RunConfig, simulate_many
from fsbp.model import ControlParams, ModelError, ProcessModel, block_graph, count_inputs, reachable_from

DEFAULT_GRID = (0.1, 0.5, 0.9)


class IndicatorError(ValueError):
    pass


@dataclass(frozen=True)
class IndicatorScore:
    name: str
    value: float
    label: str
    evidence: str = ""
    provenance: str = "computed"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def score_inputs(n: int) -> IndicatorScore:
    """FSBP level for the number of inputs to one block.

    The published intervals share their endpoints; 3 and 5 go to the
    more stable interval and 8 stays redundant.
    """
    if n < 1:
        raise IndicatorError("a block has at least one input")
    if n < 3:
        value, label = 0.5, "Not appropriate"
    elif n < 5:
        value, label = 1.0, "Optimal"
    elif n <= 8:
        value, label = 0.7, "Redundant"
    else:
        value, label = 0.2, "Unacceptable"
    return IndicatorScore("inputs_per_block", value, label, f"{n} inputs")


@dataclass(frozen=True)
class BlockCountPolicy:
    """Expert mapping from block count to a score. Defaults follow the
    3-6 blocks decomposition rule."""

    low: int = 3
    high: int = 6
    below: tuple[float, str] = (0.5, "Too coarse")
    within: tuple[float, str] = (1.0, "Optimal")
    above: tuple[float, str] = (0.2, "Overloaded")


def score_block_count(n: int, policy: BlockCountPolicy = BlockCountPolicy()) -> IndicatorScore:
    if n < 1:
        raise IndicatorError("a process has at least one block")
    if n < policy.low:
        value, label = policy.below
    elif n <= policy.high:
        value, label = policy.within
    else:
        value, label = policy.above
    return IndicatorScore(
        "block_count", value, label, f"{n} blocks (policy: {policy.low}-{policy.high} optimal)"
    )


def _ratio_band(ratio: float) -> tuple[float, str]:
    if ratio >= 1.0:
        return 1.0, "Optimal"
    if ratio >= 0.75:
        return 0.7, "Minor violations"
    if ratio >= 0.5:
        return 0.5, "Significant violations"
    return 0.2, "Unacceptable"


def sequence_violations(model: ProcessModel) -> list[str]:
    """Human-readable list of violated precedence constraints, in declaration order."""
    if model.precedence is None or model.precedence.is_empty:
        raise IndicatorError("model has no precedence constraints")
    graph = block_graph(model)
    desc = {b: reachable_from(graph, [b]) for b in graph}
    name = {b.id: b.name for b in model.blocks}
    out = []
    for a, b in model.precedence.must_precede:
        if not (b in desc[a] and a not in desc[b]):
            out.append(f"'{name[a]}' must precede '{name[b]}'")
    for a, b in model.precedence.must_parallel:
        if b in desc[a] or a in desc[b]:
            out.append(f"'{name[a]}' must run in parallel with '{name[b]}'")
    return out


def score_sequence(model: ProcessModel) -> IndicatorScore:
    """Share of satisfied precedence constraints, banded to a score.

    ``earlier`` precedes ``later`` when a route path leads from earlier to
    later and none leads back. Two blocks are parallel when neither is an
    ancestor of the other.
    """
    violations = sequence_violations(model)
    p = model.precedence
    total = len(p.must_precede) + len(p.must_parallel)
    ratio = (total - len(violations)) / total
    value, label = _ratio_band(ratio)
    evidence = (
        f"{total - len(violations)}/{total} constraints satisfied"
        + ("" if not violations else "; violated: " + "; ".join(violations))
        + " (bands are policy)"
    )
    return IndicatorScore("sequence", value, label, evidence)


# ---------------------------------------------------------------------------
# control elements


@dataclass(frozen=True)
class ControlWeights:
    valid: float = 1.0
    bad: float = 1.0
    drop: float = 0.5

    def scaled(self, factor: float) -> ControlWeights:
        return ControlWeights(self.valid * factor, self.bad * factor, self.drop * factor)


@dataclass(frozen=True)
class SweepRow:
    combo_index: int
    block_id: str
    strictness: float
    utilization: float
    avg_queue_length: float
    forwarded_valid: float
    forwarded_defective: float
    rejected_by_control: float
    dropped_timeout: float
    objective: float
    is_best: bool


@dataclass(frozen=True)
class ControlSweep:
    block_ids: tuple[str, ...]
    grid: tuple[float, ...]
    combos: tuple[tuple[float, ...], ...]
    objectives: tuple[float, ...]
    best_index: int
    rows: tuple[SweepRow, ...]
    replications: int
    weights: ControlWeights

    @property
    def best(self) -> dict[str, float]:
        return dict(zip(self.block_ids, self.combos[self.best_index]))

    def objective_of(self, combo: Sequence[float]) -> float:
        return self.objectives[self.combos.index(tuple(combo))]

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "sweep",
            "block_ids": list(self.block_ids),
            "grid": list(self.grid),
            "replications": self.replications,
            "weights": asdict(self.weights),
            "best": self.best,
            "best_objective": self.objectives[self.best_index],
            "rows": [asdict(r) for r in self.rows],
        }


SWEEP_COLUMNS = tuple(f for f in SweepRow.__dataclass_fields__)


def with_strictness(model: ProcessModel, settings: Mapping[str, float]) -> ProcessModel:
    for bid, s in settings.items():
        model = model.replace_block(bid, control=ControlParams(s))
    return model


def _objective(results, block_ids: Sequence[str], weights: ControlWeights) -> float:
    values = []
    for r in results:
        fv = sum(r.block(b).forwarded_valid for b in block_ids)
        fd = sum(r.block(b).forwarded_defective for b in block_ids)
        drops = r.dropped_timeout_total
        values.append(weights.valid * fv - weights.bad * fd - weights.drop * drops)
    return statistics.fmean(values)


def optimize_control(
    model: ProcessModel,
    block_ids: Sequence[str],
    grid: Iterable[float] = DEFAULT_GRID,
    *,
    seed: int = 1,
    replications: int = 30,
    horizon_days: int | None = None,
    weights: ControlWeights = ControlWeights(),
    n_jobs: int = 1,
) -> ControlSweep:
    """Exhaustive search over strictness combinations for the named blocks.

    Every combination is simulated with the same replication configs, so
    all grid points see common random numbers. The objective rewards valid
    requests that pass the controls and penalizes defective ones that slip
    through and timeout drops anywhere in the process. Ties go to the
    earliest combination in ascending grid order.
    """
    grid = tuple(sorted(set(float(g) for g in grid)))
    if not grid:
        raise IndicatorError("empty strictness grid")
    for g in grid:
        if not 0 < g < 1:
            raise IndicatorError(f"grid value {g} outside (0, 1)")
    block_ids = tuple(block_ids)
    if not block_ids:
        raise IndicatorError("no blocks to sweep")
    for bid in block_ids:
        try:
            b = model.block(bid)
        except ModelError:
            raise IndicatorError(f"unknown block {bid!r}") from None
        if b.control is None:
            raise IndicatorError(f"block {bid!r} has no control parameters")
    if replications < 1:
        raise IndicatorError("need at least one replication")

    configs = [RunConfig(seed=seed, horizon_days=horizon_days, replication_index=i) for i in range(replications)]
    combos = tuple(itertools.product(grid, repeat=len(block_ids)))
    objectives = []
    per_combo = []
    for combo in combos:
        results = simulate_many(with_strictness(model, dict(zip(block_ids, combo))), configs, n_jobs)
        objectives.append(_objective(results, block_ids, weights))
        per_combo.append(results)
    best = max(range(len(combos)), key=lambda i: (objectives[i], -i))

    rows = []
    for i, (combo, results) in enumerate(zip(combos, per_combo)):
        for bid, s in zip(block_ids, combo):
            def mean(attr: str) -> float:
                return statistics.fmean(getattr(r.block(bid), attr) for r in results)

            rows.append(
                SweepRow(
                    combo_index=i,
                    block_id=bid,
                    strictness=s,
                    utilization=mean("utilization"),
                    avg_queue_length=mean("avg_queue_length"),
                    forwarded_valid=mean("forwarded_valid"),
                    forwarded_defective=mean("forwarded_defective"),
                    rejected_by_control=mean("rejected_by_control"),
                    dropped_timeout=mean("dropped_timeout"),
                    objective=objectives[i],
                    is_best=i == best,
                )
            )
    return ControlSweep(block_ids, grid, combos, tuple(objectives), best, tuple(rows), replications, weights)


def _shortfall_band(shortfall: float) -> tuple[float, str]:
    if shortfall <= 0.05:
        return 1.0, "Optimal"
    if shortfall <= 0.25:
        return 0.7, "Acceptable"
    if shortfall <= 0.75:
        return 0.5, "Degraded"
    return 0.2, "Unacceptable"


def score_control(
    model: ProcessModel,
    grid: Iterable[float] = DEFAULT_GRID,
    *,
    seed: int = 1,
    replications: int = 30,
    horizon_days: int | None = None,
    weights: ControlWeights = ControlWeights(),
) -> IndicatorScore:
    """How close the current control settings come to the best grid setting."""
    blocks = model.control_blocks()
    if not blocks:
        raise IndicatorError("model has no control blocks")
    current = tuple(b.control.strictness for b in blocks)
    sweep = optimize_control(
        model,
        [b.id for b in blocks],
        tuple(grid) + current,
        seed=seed,
        replications=replications,
        horizon_days=horizon_days,
        weights=weights,
    )
    j_best = sweep.objectives[sweep.best_index]
    j_cur = sweep.objective_of(current)
    shortfall = 0.0 if j_best == j_cur else (j_best - j_cur) / max(abs(j_best), 1e-12)
    value, label = _shortfall_band(shortfall)
    evidence = (
        f"objective {j_cur:.4g} at current settings {dict(zip(sweep.block_ids, current))}, "
        f"best {j_best:.4g} at {sweep.best}; shortfall {shortfall:.1%} (bands are policy)"
    )
    return IndicatorScore("control_limit", value, label, evidence)


# ---------------------------------------------------------------------------
# recovery


def without_failures(model: ProcessModel) -> ProcessModel:
    return replace(
        model, blocks=tuple(replace(b, failure=None) if b.failure else b for b in model.blocks)
    )


@dataclass(frozen=True)
class RecoveryAnalysis:
    baseline_time_in_system: float
    failed_time_in_system: float
    degradation: float
    baseline_drops: float
    failed_drops: float
    score: IndicatorScore
    paired_degradation: tuple[float, ...] = field(default=(), repr=False)


def degradation(failed: float, baseline: float) -> float:
    if baseline == 0:
        return 0.0 if failed == 0 else float("inf")
    return (failed - baseline) / baseline


def analyze_recovery(
    model: ProcessModel,
    *,
    seed: int = 1,
    replications: int = 30,
    horizon_days: int | None = None,
    n_jobs: int = 1,
) -> RecoveryAnalysis:
    """Paired runs with the failure profiles switched on and off."""
    if not model.failing_blocks():
        raise IndicatorError("no block has a failure profile")
    configs = [RunConfig(seed=seed, horizon_days=horizon_days, replication_index=i) for i in range(replications)]
    base = simulate_many(without_failures(model), configs, n_jobs)
    failed = simulate_many(model, configs, n_jobs)
    b_t = statistics.fmean(r.avg_time_in_system_days for r in base)
    f_t = statistics.fmean(r.avg_time_in_system_days for r in failed)
    d = degradation(f_t, b_t)
    value, label = _shortfall_band(d)
    names = ", ".join(b.name for b in model.failing_blocks())
    score = IndicatorScore(
        "recovery_time",
        value,
        label,
        f"time in system {b_t:.4g} -> {f_t:.4g} days with failures at {names} "
        f"(degradation {d:.1%}, bands are policy)",
    )
    return RecoveryAnalysis(
        baseline_time_in_system=b_t,
        failed_time_in_system=f_t,
        degradation=d,
        baseline_drops=statistics.fmean(r.dropped_timeout_total for r in base),
        failed_drops=statistics.fmean(r.dropped_timeout_total for r in failed),
        score=score,
        paired_degradation=tuple(
            degradation(f.avg_time_in_system_days, b.avg_time_in_system_days)
            for b, f in zip(base, failed)
        ),
    )


def score_recovery(model: ProcessModel, **kwargs: Any) -> IndicatorScore:
    return analyze_recovery(model, **kwargs).score


# ---------------------------------------------------------------------------
# assessment


@dataclass(frozen=True)
class FSAssessment:
    S: tuple[IndicatorScore, ...]
    O: tuple[IndicatorScore, ...]
    L: tuple[IndicatorScore, ...]
    notes: tuple[str, ...] = ()

    def get(self, name: str) -> IndicatorScore:
        for s in self.S + self.O + self.L:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "S": [s.to_dict() for s in self.S],
            "O": [s.to_dict() for s in self.O],
            "L": [s.to_dict() for s in self.L],
            "notes": list(self.notes),
        }


def legal_scores(values: Iterable[Mapping[str, Any]]) -> tuple[IndicatorScore, ...]:
    out = []
    for v in values:
        try:
            out.append(
                IndicatorScore(
                    name=str(v["name"]),
                    value=float(v["value"]),
                    label=str(v.get("label", "")),
                    evidence=str(v.get("evidence", "")),
                    provenance="external",
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IndicatorError(f"bad legal indicator entry {v!r}: {exc}") from None
    return tuple(out)


def worst_inputs_score(model: ProcessModel) -> IndicatorScore:
    scored = [(score_inputs(max(1, count_inputs(model, b.id))), b) for b in model.blocks]
    worst, block = min(scored, key=lambda sb: sb[0].value)
    return replace(worst, evidence=f"worst block '{block.name}': {worst.evidence}")


def assess(
    model: ProcessModel,
    legal_values: Iterable[Mapping[str, Any]] | None = None,
    *,
    replications: int = 0,
    seed: int = 1,
    grid: Iterable[float] = DEFAULT_GRID,
    block_policy: BlockCountPolicy = BlockCountPolicy(),
) -> FSAssessment:
    """Score every applicable indicator.

    Organizational scores need simulation and are computed only when
    ``replications > 0``. Components that do not apply are left out rather
    than filled with a default.
    """
    S = [worst_inputs_score(model), score_block_count(len(model.blocks), block_policy)]
    notes = []
    if model.precedence is not None and not model.precedence.is_empty:
        S.append(score_sequence(model))
    else:
        notes.append("sequence: no precedence constraints in model")

    O = []
    if replications > 0:
        if model.control_blocks():
            O.append(score_control(model, grid, seed=seed, replications=replications))
        else:
            notes.append("control_limit: no control blocks")
        if any(b.failure.failure_rate_per_day > 0 for b in model.failing_blocks()):
            O.append(score_recovery(model, seed=seed, replications=replications))
        else:
            notes.append("recovery_time: no failure profiles")
    else:
        notes.append("organizational indicators not requested (no simulation runs)")

    L = legal_scores(legal_values or [])
    if not L:
        notes.append("legal indicators: none supplied")
    return FSAssessment(tuple(S), tuple(O), L, tuple(notes))
