"""Run statistics, replication aggregates and before/after comparison.

Per block the four evaluation metrics are average queue length, dropped
requests (timeout and capacity drops), utilization, and, system-wide,
average time in system of completed requests.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal, Mapping, Sequence, Union
from xml.sax.saxutils import escape

from scipy import stats as _scistats

SYSTEM_ROW = "(system)"


class ComparisonError(ValueError):
    pass


class BlockMonitor:
    """Accumulates one block's statistics over the observation window.

    The engine calls :meth:`update` with the queue length and busy-server
    count that held since the previous call, before every state change.
    """

    __slots__ = (
        "block_id",
        "name",
        "capacity",
        "warmup",
        "horizon",
        "last_t",
        "queue_area",
        "busy_area",
        "arrivals",
        "carried_in",
        "served",
        "dropped_timeout",
        "dropped_capacity",
        "rejected_by_control",
        "in_system_end",
        "started",
        "waited",
        "wait_sum",
        "forwarded_valid",
        "forwarded_defective",
        "failures",
        "downtime",
        "down_since",
    )

    def __init__(self, block_id: str, name: str, capacity: int, warmup: float, horizon: float):
        self.block_id = block_id
        self.name = name
        self.capacity = capacity
        self.warmup = warmup
        self.horizon = horizon
        self.last_t = 0.0
        self.queue_area = 0.0
        self.busy_area = 0.0
        self.arrivals = self.carried_in = self.served = 0
        self.dropped_timeout = self.dropped_capacity = self.rejected_by_control = 0
        self.in_system_end = self.started = self.waited = 0
        self.wait_sum = 0.0
        self.forwarded_valid = self.forwarded_defective = 0
        self.failures = 0
        self.downtime = 0.0
        self.down_since = 0.0

    def update(self, t: float, queue_len: int, busy: int) -> None:
        lo = self.last_t if self.last_t > self.warmup else self.warmup
        hi = t if t < self.horizon else self.horizon
        if hi > lo:
            span = hi - lo
            self.queue_area += queue_len * span
            self.busy_area += busy * span
        self.last_t = t

    def add_downtime(self, start: float, end: float) -> None:
        lo, hi = max(start, self.warmup), min(end, self.horizon)
        if hi > lo:
            self.downtime += hi - lo

    @property
    def conserved(self) -> bool:
        return self.arrivals == (
            self.served
            + self.dropped_timeout
            + self.dropped_capacity
            + self.rejected_by_control
            + self.in_system_end
        )


@dataclass(frozen=True)
class BlockStats:
    """Statistics of one block over the observation window.

    ``arrivals`` includes ``carried_in``, the requests already present when
    the window opened, so that ``arrivals = served + dropped_timeout +
    dropped_capacity + rejected_by_control + in_system_end`` holds exactly.
    """

    block_id: str
    name: str
    capacity: int
    arrivals: int
    carried_in: int
    served: int
    dropped_timeout: int
    dropped_capacity: int
    rejected_by_control: int
    in_system_end: int
    avg_queue_length: float
    utilization: float
    avg_wait_days: float
    wait_probability: float
    started: int
    forwarded_valid: int
    forwarded_defective: int
    failures: int
    downtime_days: float

    @property
    def dropped_total(self) -> int:
        return self.dropped_timeout + self.dropped_capacity

    @property
    def conserved(self) -> bool:
        return self.arrivals == (
            self.served
            + self.dropped_timeout
            + self.dropped_capacity
            + self.rejected_by_control
            + self.in_system_end
        )


@dataclass(frozen=True)
class SourceStats:
    source_id: str
    name: str
    emitted: int
    suppressed: int
    defective: int


@dataclass(frozen=True)
class RunResult:
    model_name: str
    seed: int
    replication_index: int
    horizon_days: int
    warmup_days: int
    blocks: tuple[BlockStats, ...]
    sources: tuple[SourceStats, ...]
    avg_time_in_system_days: float
    completed: int
    queue_length_series: Mapping[str, tuple[int, ...]]
    traces: Any = field(default=None, compare=False, repr=False)

    def block(self, key: str) -> BlockStats:
        """Look a block up by id or by (case-insensitive) name."""
        for b in self.blocks:
            if b.block_id == key or b.name.lower() == key.lower():
                return b
        raise KeyError(key)

    @property
    def dropped_timeout_total(self) -> int:
        return sum(b.dropped_timeout for b in self.blocks)

    @property
    def mean_queue_length(self) -> float:
        return statistics.fmean(b.avg_queue_length for b in self.blocks) if self.blocks else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "run_result",
            "model_name": self.model_name,
            "seed": self.seed,
            "replication_index": self.replication_index,
            "horizon_days": self.horizon_days,
            "warmup_days": self.warmup_days,
            "avg_time_in_system_days": self.avg_time_in_system_days,
            "completed": self.completed,
            "blocks": [asdict(b) for b in self.blocks],
            "sources": [asdict(s) for s in self.sources],
            "queue_length_series": {k: list(v) for k, v in self.queue_length_series.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunResult:
        return cls(
            model_name=d["model_name"],
            seed=d["seed"],
            replication_index=d["replication_index"],
            horizon_days=d["horizon_days"],
            warmup_days=d["warmup_days"],
            blocks=tuple(BlockStats(**b) for b in d["blocks"]),
            sources=tuple(SourceStats(**s) for s in d["sources"]),
            avg_time_in_system_days=d["avg_time_in_system_days"],
            completed=d["completed"],
            queue_length_series={k: tuple(v) for k, v in d["queue_length_series"].items()},
        )


def collect(
    *,
    model_name: str,
    seed: int,
    replication_index: int,
    horizon_days: int,
    warmup_days: int,
    monitors: Sequence[BlockMonitor],
    sources: Sequence[SourceStats],
    completed: int,
    time_in_system_sum: float,
    series: Mapping[str, Sequence[int]],
    traces: Any = None,
) -> RunResult:
    """Turn the engine's raw accumulators into a :class:`RunResult`."""
    window = float(horizon_days - warmup_days)
    blocks = []
    for m in monitors:
        utilization = m.busy_area / (m.capacity * window)
        blocks.append(
            BlockStats(
                block_id=m.block_id,
                name=m.name,
                capacity=m.capacity,
                arrivals=m.arrivals,
                carried_in=m.carried_in,
                served=m.served,
                dropped_timeout=m.dropped_timeout,
                dropped_capacity=m.dropped_capacity,
                rejected_by_control=m.rejected_by_control,
                in_system_end=m.in_system_end,
                avg_queue_length=m.queue_area / window,
                utilization=min(1.0, max(0.0, utilization)),
                avg_wait_days=m.wait_sum / m.started if m.started else 0.0,
                wait_probability=m.waited / m.started if m.started else 0.0,
                started=m.started,
                forwarded_valid=m.forwarded_valid,
                forwarded_defective=m.forwarded_defective,
                failures=m.failures,
                downtime_days=m.downtime,
            )
        )
    return RunResult(
        model_name=model_name,
        seed=seed,
        replication_index=replication_index,
        horizon_days=horizon_days,
        warmup_days=warmup_days,
        blocks=tuple(blocks),
        sources=tuple(sources),
        avg_time_in_system_days=time_in_system_sum / completed if completed else 0.0,
        completed=completed,
        queue_length_series={k: tuple(v) for k, v in series.items()},
        traces=traces,
    )


# ---------------------------------------------------------------------------
# aggregation

BLOCK_METRICS = (
    "avg_queue_length",
    "utilization",
    "served",
    "dropped_timeout",
    "dropped_capacity",
    "rejected_by_control",
    "avg_wait_days",
    "wait_probability",
    "forwarded_valid",
    "forwarded_defective",
    "arrivals",
    "in_system_end",
    "failures",
    "downtime_days",
)
SYSTEM_METRICS = ("avg_time_in_system_days", "completed")


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    ci_low: float
    ci_high: float
    n: int

    @property
    def stderr(self) -> float:
        return self.std / math.sqrt(self.n) if self.n > 0 else 0.0


def summarize(values: Sequence[float], confidence: float = 0.95) -> MetricSummary:
    """Mean, sample standard deviation and a two-sided confidence interval.

    Uses the normal quantile for ``n >= 30`` and Student's t otherwise.
    """
    n = len(values)
    if n == 0:
        raise ValueError("no values to summarize")
    mean = statistics.fmean(values)
    if n == 1:
        return MetricSummary(mean, 0.0, mean, mean, 1)
    std = statistics.stdev(values)
    q = (1 + confidence) / 2
    crit = statistics.NormalDist().inv_cdf(q) if n >= 30 else float(_scistats.t.ppf(q, n - 1))
    half = crit * std / math.sqrt(n)
    return MetricSummary(mean, std, mean - half, mean + half, n)


@dataclass(frozen=True)
class BlockAggregate:
    block_id: str
    name: str
    metrics: Mapping[str, MetricSummary]

    def __getitem__(self, metric: str) -> MetricSummary:
        return self.metrics[metric]


@dataclass(frozen=True)
class AggregateResult:
    model_name: str
    horizon_days: int
    warmup_days: int
    n: int
    seeds: tuple[tuple[int, int], ...]
    blocks: tuple[BlockAggregate, ...]
    system: Mapping[str, MetricSummary]

    def block(self, key: str) -> BlockAggregate:
        for b in self.blocks:
            if b.block_id == key or b.name.lower() == key.lower():
                return b
        raise KeyError(key)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "aggregate",
            "model_name": self.model_name,
            "horizon_days": self.horizon_days,
            "warmup_days": self.warmup_days,
            "n": self.n,
            "seeds": [list(s) for s in self.seeds],
            "system": {k: asdict(v) for k, v in self.system.items()},
            "blocks": [
                {
                    "block_id": b.block_id,
                    "name": b.name,
                    "metrics": {k: asdict(v) for k, v in b.metrics.items()},
                }
                for b in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AggregateResult:
        return cls(
            model_name=d["model_name"],
            horizon_days=d["horizon_days"],
            warmup_days=d["warmup_days"],
            n=d["n"],
            seeds=tuple(tuple(s) for s in d["seeds"]),
            blocks=tuple(
                BlockAggregate(
                    b["block_id"],
                    b["name"],
                    {k: MetricSummary(**v) for k, v in b["metrics"].items()},
                )
                for b in d["blocks"]
            ),
            system={k: MetricSummary(**v) for k, v in d["system"].items()},
        )


def aggregate(results: Sequence[RunResult], confidence: float = 0.95) -> AggregateResult:
    """Summarize replications of one model run at one horizon."""
    if not results:
        raise ValueError("aggregate needs at least one result")
    first = results[0]
    shape = [(b.block_id, b.name) for b in first.blocks]
    for r in results[1:]:
        if (
            r.model_name != first.model_name
            or r.horizon_days != first.horizon_days
            or r.warmup_days != first.warmup_days
            or [(b.block_id, b.name) for b in r.blocks] != shape
        ):
            raise ValueError("cannot aggregate results of different models or horizons")
    blocks = []
    for i, (bid, name) in enumerate(shape):
        blocks.append(
            BlockAggregate(
                bid,
                name,
                {
                    m: summarize([float(getattr(r.blocks[i], m)) for r in results], confidence)
                    for m in BLOCK_METRICS
                },
            )
        )
    system = {m: summarize([float(getattr(r, m)) for r in results], confidence) for m in SYSTEM_METRICS}
    return AggregateResult(
        model_name=first.model_name,
        horizon_days=first.horizon_days,
        warmup_days=first.warmup_days,
        n=len(results),
        seeds=tuple((r.seed, r.replication_index) for r in results),
        blocks=tuple(blocks),
        system=system,
    )


def result_from_dict(d: Mapping[str, Any]) -> RunResult | AggregateResult:
    kind = d.get("kind")
    if kind == "run_result":
        return RunResult.from_dict(d)
    if kind == "aggregate":
        return AggregateResult.from_dict(d)
    raise ValueError(f"not a run result or aggregate (kind={kind!r})")


# ---------------------------------------------------------------------------
# comparison

Verdict = Literal["increased", "decreased", "unchanged", "removed", "added"]
COMPARE_METRICS = ("utilization", "avg_queue_length", "dropped_timeout", "dropped_capacity", "rejected_by_control")
Result = Union[RunResult, AggregateResult]


@dataclass(frozen=True)
class ComparisonRow:
    block: str
    metric: str
    before: float | None
    after: float | None
    delta_percent: float | None
    verdict: Verdict

    @property
    def text(self) -> str:
        return verdict_text(self)


@dataclass(frozen=True)
class ComparisonReport:
    threshold_percent: float
    horizon_days: int
    rows: tuple[ComparisonRow, ...]

    def row(self, block: str, metric: str) -> ComparisonRow:
        for r in self.rows:
            if r.block.lower() == block.lower() and r.metric == metric:
                return r
        raise KeyError((block, metric))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "comparison",
            "threshold_percent": self.threshold_percent,
            "horizon_days": self.horizon_days,
            "rows": [dict(asdict(r), text=r.text) for r in self.rows],
        }


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def classify(before: float, after: float, threshold_percent: float = 1.0) -> tuple[float | None, Verdict]:
    """Percent change relative to ``before`` and its verdict.

    A zero base has no percent: equal values are unchanged, otherwise the
    direction is reported without a number.
    """
    if before == 0:
        if after == 0:
            return 0.0, "unchanged"
        return None, "increased" if after > 0 else "decreased"
    delta = (after - before) / before * 100.0
    if abs(delta) < threshold_percent:
        return delta, "unchanged"
    return delta, "increased" if delta > 0 else "decreased"


def verdict_text(row: ComparisonRow) -> str:
    if row.verdict == "unchanged":
        return "Unchanged"
    if row.verdict == "removed":
        return "Removed"
    if row.verdict == "added":
        return "Added"
    if row.delta_percent is None:
        return "Added load" if row.verdict == "increased" else "Decreased"
    word = "Increased" if row.verdict == "increased" else "Decreased"
    return f"{word} by {abs(round_half_away(row.delta_percent))}%"


def _block_values(result: Result) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    if isinstance(result, RunResult):
        for b in result.blocks:
            out[b.name] = {m: float(getattr(b, m)) for m in COMPARE_METRICS}
    else:
        for b in result.blocks:
            out[b.name] = {m: b.metrics[m].mean for m in COMPARE_METRICS}
    return out


def _system_value(result: Result) -> float:
    if isinstance(result, RunResult):
        return result.avg_time_in_system_days
    return result.system["avg_time_in_system_days"].mean


def compare(
    before: Result,
    after: Result,
    threshold_percent: float = 1.0,
    metrics: Sequence[str] = COMPARE_METRICS,
) -> ComparisonReport:
    """Match blocks by name and report percent changes from ``before``."""
    if before.horizon_days != after.horizon_days:
        raise ComparisonError(
            f"horizon mismatch: {before.horizon_days} vs {after.horizon_days} days"
        )
    bv, av = _block_values(before), _block_values(after)
    rows: list[ComparisonRow] = []
    names = list(bv) + [n for n in av if n not in bv]
    for name in names:
        for m in metrics:
            if name not in av:
                rows.append(ComparisonRow(name, m, bv[name][m], None, None, "removed"))
            elif name not in bv:
                rows.append(ComparisonRow(name, m, None, av[name][m], None, "added"))
            else:
                delta, verdict = classify(bv[name][m], av[name][m], threshold_percent)
                rows.append(ComparisonRow(name, m, bv[name][m], av[name][m], delta, verdict))
    b_sys, a_sys = _system_value(before), _system_value(after)
    delta, verdict = classify(b_sys, a_sys, threshold_percent)
    rows.append(ComparisonRow(SYSTEM_ROW, "avg_time_in_system_days", b_sys, a_sys, delta, verdict))
    return ComparisonReport(threshold_percent, before.horizon_days, tuple(rows))


def format_value(v: float | None) -> str:
    if v is None:
        return "-----"
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return f"{v:.4g}"


def render_comparison(report: ComparisonReport) -> str:
    """Plain-text table in the Before / After / % layout."""
    header = ("Block", "Metric", "Before", "After", "%")
    body = []
    for r in report.rows:
        pct = "" if r.verdict in ("removed", "added") else r.text
        body.append((r.block, r.metric, format_value(r.before), format_value(r.after), pct))
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_run_table(result: Result) -> str:
    """The four evaluation metrics per block, as a text table."""

    def get(b: Any, m: str) -> float:
        return float(getattr(b, m)) if isinstance(result, RunResult) else b.metrics[m].mean

    header = ("Block", "Avg queue", "Dropped (timeout)", "Dropped (capacity)", "Utilization")
    rows = [
        (
            b.name,
            f"{get(b, 'avg_queue_length'):.4g}",
            format_value(get(b, "dropped_timeout")),
            format_value(get(b, "dropped_capacity")),
            f"{get(b, 'utilization'):.4g}",
        )
        for b in result.blocks
    ]
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append(f"Average time in system: {_system_value(result):.4g} days")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# series export

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def write_series_csv(path: Path, first_day: int, series: Sequence[int]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "queue_length"])
        for i, q in enumerate(series):
            w.writerow([first_day + i, q])


def queue_length_svg(result: RunResult, width: int = 800, height: int = 400) -> str:
    left, right, top, bottom = 60, 220, 20, 40
    pw, ph = width - left - right, height - top - bottom
    first = result.warmup_days + 1
    n = result.horizon_days - result.warmup_days
    ymax = max([1] + [max(s, default=0) for s in result.queue_length_series.values()])

    def x(i: int) -> float:
        return left + (pw * i / (n - 1) if n > 1 else 0.0)

    def y(v: float) -> float:
        return top + ph - ph * v / ymax

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
        f'<text x="{left}" y="{height - 10}" font-size="12">day {first}</text>',
        f'<text x="{left + pw}" y="{height - 10}" font-size="12" text-anchor="end">day {result.horizon_days}</text>',
        f'<text x="{left - 5}" y="{top + 10}" font-size="12" text-anchor="end">{ymax}</text>',
        f'<text x="{left - 5}" y="{top + ph}" font-size="12" text-anchor="end">0</text>',
    ]
    for k, b in enumerate(result.blocks):
        colour = _PALETTE[k % len(_PALETTE)]
        series = result.queue_length_series[b.block_id]
        pts = " ".join(f"{x(i):.2f},{y(v):.2f}" for i, v in enumerate(series))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1" points="{pts}"/>')
        ly = top + 15 + 16 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" stroke="{colour}"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly}" font-size="11">{escape(b.name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_series(result: RunResult, out_dir: str | Path) -> list[Path]:
    """Write ``series/<block>.csv`` for each block and ``queue_length.svg``."""
    out = Path(out_dir)
    series_dir = out / "series"
    try:
        series_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for b in result.blocks:
            p = series_dir / f"{b.block_id}.csv"
            write_series_csv(p, result.warmup_days + 1, result.queue_length_series[b.block_id])
            written.append(p)
        svg = out / "queue_length.svg"
        svg.write_text(queue_length_svg(result), encoding="utf-8")
        written.append(svg)
    except OSError as exc:
        raise OSError(f"cannot write series to {exc.filename or out}: {exc.strerror}") from exc
    return written


def dump_json(doc: Any) -> str:
    """Canonical JSON text used for every file output."""
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
