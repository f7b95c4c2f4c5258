"""Seeded discrete-event simulation of a process model.

One run covers ``[0, horizon]`` business days. Statistics are collected
only over ``[warmup, horizon]``. Every source and block draws from its own
named random sub-stream derived from ``(seed, replication_index, name)``,
so editing one part of a model leaves the random numbers seen by the rest
untouched and before/after runs share common random numbers.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from collections import OrderedDict, deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Literal, NamedTuple, Sequence

from fsbp.metrics import BlockMonitor, RunResult, SourceStats, collect
from fsbp.model import Block, ControlParams, ProcessModel, Source, validate

# Tie-break priority for simultaneous events (lower runs first).
SERVICE_END, REPAIR, FAILURE, TIMEOUT, ARRIVAL = range(5)
EVENT_KINDS = ("service_end", "repair", "failure", "timeout", "arrival")

MAX_SEED = 2**64 - 1


class SimulationError(RuntimeError):
    """Internal consistency failure. Always a bug, never bad input."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    horizon_days: int | None = None
    replication_index: int = 0
    trace: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.seed <= MAX_SEED:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.replication_index < 0:
            raise ValueError("replication_index must be >= 0")
        if self.horizon_days is not None and self.horizon_days <= 0:
            raise ValueError("horizon_days must be > 0")


class Event(NamedTuple):
    time: float
    kind: int
    seq: int
    subject: int
    payload: object = None


class Request:
    """One workflow item. ``trace`` holds ``[block, enqueue, start, finish]``
    rows when tracing is enabled."""

    __slots__ = ("id", "source_id", "created_day", "defective", "trace")

    def __init__(self, rid: int, source_id: str, created: float, defective: bool, trace: bool):
        self.id = rid
        self.source_id = source_id
        self.created_day = created
        self.defective = defective
        self.trace: list[list] | None = [] if trace else None

    def __repr__(self) -> str:
        return f"Request({self.id}, {self.source_id!r}, created={self.created_day:.3f})"


def substream(seed: int, replication_index: int, name: str) -> random.Random:
    """Independent generator for one named purpose within one run."""
    digest = hashlib.blake2b(
        f"{seed}/{replication_index}/{name}".encode(), digest_size=16
    ).digest()
    return random.Random(int.from_bytes(digest, "big"))


def next_interarrival(rng: random.Random, intensity: float) -> float:
    """Exponential gap with mean ``1 / intensity`` days, strictly positive."""
    if intensity <= 0:
        raise ValueError("intensity must be > 0")
    while True:
        gap = rng.expovariate(intensity)
        if gap > 0.0:
            return gap


def control_service_time(base_days: float, params: ControlParams) -> float:
    """Mean service time of a control block: stricter checks run slower."""
    return base_days * (params.strictness / 0.5)


def control_check(
    request: Request, params: ControlParams, rng: random.Random
) -> Literal["forward", "reject"]:
    if not request.defective:
        return "forward"
    return "reject" if rng.random() < params.strictness else "forward"


def effective_capacity(block: Block, failed: bool) -> int:
    if not failed or block.failure is None:
        return block.capacity
    return math.ceil(block.capacity * (1.0 - block.failure.severity))


def schedule_failures(
    block: Block, horizon_days: float, rng: random.Random
) -> Iterator[tuple[float, float]]:
    """Yield non-overlapping ``(failure_time, repair_time)`` pairs.

    Time to the next failure is exponential and only starts counting after
    the previous repair.
    """
    profile = block.failure
    if profile is None or profile.failure_rate_per_day <= 0:
        return
    t = 0.0
    while True:
        t += rng.expovariate(profile.failure_rate_per_day)
        if t > horizon_days:
            return
        yield t, t + profile.recovery_time_days
        t += profile.recovery_time_days


class BlockState:
    """Mutable per-block simulation state."""

    __slots__ = (
        "block",
        "index",
        "successors",
        "capacity",
        "failed",
        "service_mean",
        "queue",
        "in_service",
        "service_rng",
        "control_rng",
        "route_rng",
        "failures",
        "monitor",
    )

    def __init__(self, block: Block, index: int, monitor: BlockMonitor | None = None):
        self.block = block
        self.index = index
        self.successors: list[BlockState] = []
        self.capacity = block.capacity
        self.failed = False
        self.service_mean = (
            control_service_time(block.service_time_days, block.control)
            if block.control is not None
            else block.service_time_days
        )
        # request id -> (request, enqueue time, exempt from timeout)
        self.queue: OrderedDict[int, tuple[Request, float, bool]] = OrderedDict()
        # request id -> (request, token, start time); insertion order = start order
        self.in_service: dict[int, tuple[Request, int, float]] = {}
        self.service_rng: random.Random | None = None
        self.control_rng: random.Random | None = None
        self.route_rng: random.Random | None = None
        self.failures: Iterator[tuple[float, float]] = iter(())
        self.monitor = monitor

    @property
    def in_system(self) -> int:
        return len(self.queue) + len(self.in_service)


def timeout_sweep(state: BlockState, now: float) -> list[Request]:
    """Remove and return queued requests whose relevance window has closed.

    A request enqueued at ``e`` expires at ``e + timeout_days``. Requests put
    back at the head of the queue after a failure interrupted their service
    are exempt.
    """
    timeout = state.block.timeout_days
    if timeout is None:
        return []
    expired = []
    for rid, (req, enq, exempt) in state.queue.items():
        if exempt:
            continue
        if enq + timeout > now:
            break
        expired.append(rid)
    return [state.queue.pop(rid)[0] for rid in expired]


class _SourceState:
    __slots__ = ("source", "index", "target", "arrival_rng", "defect_rng", "window", "period", "stats")

    def __init__(self, source: Source, index: int, target: BlockState, horizon: float):
        self.source = source
        self.index = index
        self.target = target
        self.window: deque[float] = deque()
        limit = source.emission_limit
        self.period = None if limit is None else (limit.period_days or float(horizon))
        self.stats = [0, 0, 0]  # emitted, suppressed, defective


class Simulation:
    """A single run. Use :func:`simulate` unless you need the live state."""

    def __init__(self, model: ProcessModel, config: RunConfig):
        errors = [d for d in validate(model) if d.severity == "error"]
        if errors:
            raise ValueError("model has errors: " + "; ".join(map(str, errors)))
        self.model = model
        self.config = config
        self.horizon = float(config.horizon_days or model.horizon_days)
        self.warmup = float(model.warmup_days)
        if not self.horizon > self.warmup:
            raise ValueError("effective horizon must exceed warmup")

        def rng(name: str) -> random.Random:
            return substream(config.seed, config.replication_index, name)

        self.blocks: list[BlockState] = []
        by_id: dict[str, BlockState] = {}
        for i, b in enumerate(model.blocks):
            st = BlockState(b, i, BlockMonitor(b.id, b.name, b.capacity, self.warmup, self.horizon))
            st.service_rng = rng(f"block:{b.id}:service")
            st.control_rng = rng(f"block:{b.id}:control")
            st.route_rng = rng(f"block:{b.id}:routing")
            st.failures = schedule_failures(b, self.horizon, rng(f"block:{b.id}:failure"))
            self.blocks.append(st)
            by_id[b.id] = st
        for st in self.blocks:
            st.successors = [by_id[d] for d in model.successors(st.block.id)]

        self.sources: list[_SourceState] = []
        for i, s in enumerate(model.sources):
            ss = _SourceState(s, i, by_id[s.target], self.horizon)
            ss.arrival_rng = rng(f"source:{s.id}:arrival")
            ss.defect_rng = rng(f"source:{s.id}:defect")
            self.sources.append(ss)

        self.clock = 0.0
        self._heap: list[Event] = []
        self._seq = 0
        self._next_rid = 0
        self._next_day = int(self.warmup) + 1
        self._series: list[list[int]] = [[] for _ in self.blocks]
        self._snapshot_taken = False
        self.completed = 0
        self.time_in_system_sum = 0.0
        self.requests: list[Request] = []

    # -- calendar ---------------------------------------------------------

    def _schedule(self, time: float, kind: int, subject: int, payload: object = None) -> None:
        if time < self.clock:
            raise SimulationError(f"event {EVENT_KINDS[kind]} scheduled in the past: {time} < {self.clock}")
        self._seq += 1
        heapq.heappush(self._heap, Event(time, kind, self._seq, subject, payload))

    def _next_arrival_time(self, ss: _SourceState, now: float) -> float | None:
        src = ss.source
        if src.intensity > 0:
            return now + next_interarrival(ss.arrival_rng, src.intensity)
        if src.period_days is None:
            return None
        return now + src.period_days

    # -- run --------------------------------------------------------------

    def run(self) -> RunResult:
        for i, ss in enumerate(self.sources):
            t = self._next_arrival_time(ss, 0.0)
            if t is not None:
                self._schedule(t, ARRIVAL, i)
        for st in self.blocks:
            self._schedule_next_failure(st)

        heap = self._heap
        horizon = self.horizon
        while heap and heap[0].time <= horizon:
            ev = heapq.heappop(heap)
            t = ev.time
            if t < self.clock:
                raise SimulationError(f"clock would run backwards: {t} < {self.clock}")
            if not self._snapshot_taken and t >= self.warmup:
                self._take_snapshot()
            while self._next_day < t and self._next_day <= horizon:
                self._sample()
            self.clock = t
            kind = ev.kind
            if kind == SERVICE_END:
                self._on_service_end(self.blocks[ev.subject], ev.payload, t)
            elif kind == ARRIVAL:
                self._on_arrival(self.sources[ev.subject], t)
            elif kind == TIMEOUT:
                self._on_timeout(self.blocks[ev.subject], t)
            elif kind == FAILURE:
                self._on_failure(self.blocks[ev.subject], ev.payload, t)
            elif kind == REPAIR:
                self._on_repair(self.blocks[ev.subject], t)
        if not self._snapshot_taken:
            self._take_snapshot()
        while self._next_day <= horizon:
            self._sample()
        self.clock = max(self.clock, horizon)
        for st in self.blocks:
            st.monitor.update(horizon, len(st.queue), len(st.in_service))
            st.monitor.in_system_end = st.in_system
            if not st.monitor.conserved:
                raise SimulationError(f"conservation broken at block {st.block.id}")

        return collect(
            model_name=self.model.name,
            seed=self.config.seed,
            replication_index=self.config.replication_index,
            horizon_days=int(horizon),
            warmup_days=int(self.warmup),
            monitors=[st.monitor for st in self.blocks],
            sources=[
                SourceStats(ss.source.id, ss.source.name, *ss.stats) for ss in self.sources
            ],
            completed=self.completed,
            time_in_system_sum=self.time_in_system_sum,
            series={st.block.id: self._series[st.index] for st in self.blocks},
            traces=self.requests if self.config.trace else None,
        )

    def _take_snapshot(self) -> None:
        self._snapshot_taken = True
        for st in self.blocks:
            n = st.in_system
            st.monitor.carried_in = n
            st.monitor.arrivals += n

    def _sample(self) -> None:
        for st in self.blocks:
            self._series[st.index].append(len(st.queue))
        self._next_day += 1

    # -- handlers ---------------------------------------------------------

    def _on_arrival(self, ss: _SourceState, t: float) -> None:
        nxt = self._next_arrival_time(ss, t)
        if nxt is not None:
            self._schedule(nxt, ARRIVAL, ss.index)
        counted = t >= self.warmup
        if ss.period is not None:
            window = ss.window
            while window and window[0] <= t - ss.period:
                window.popleft()
            if len(window) >= ss.source.emission_limit.max_count:
                if counted:
                    ss.stats[1] += 1
                return
            window.append(t)
        rate = ss.source.defect_rate
        defective = rate >= 1.0 or (rate > 0.0 and ss.defect_rng.random() < rate)
        self._next_rid += 1
        req = Request(self._next_rid, ss.source.id, t, defective, self.config.trace)
        if self.config.trace:
            self.requests.append(req)
        if counted:
            ss.stats[0] += 1
            if defective:
                ss.stats[2] += 1
        self._enter(ss.target, req, t)

    @staticmethod
    def _touch(st: BlockState, t: float) -> None:
        # integrate the levels that held since the last change; call before mutating
        st.monitor.update(t, len(st.queue), len(st.in_service))

    def _enter(self, st: BlockState, req: Request, t: float) -> None:
        mon = st.monitor
        self._touch(st, t)
        if t >= self.warmup:
            mon.arrivals += 1
        if req.trace is not None:
            req.trace.append([st.block.id, t, None, None])
        if not st.queue and len(st.in_service) < st.capacity:
            self._start(st, req, t, t, True)
            return
        limit = st.block.queue_limit
        if limit is not None and len(st.queue) >= limit:
            if t >= self.warmup:
                mon.dropped_capacity += 1
            return
        st.queue[req.id] = (req, t, False)
        if st.block.timeout_days is not None:
            self._schedule(t + st.block.timeout_days, TIMEOUT, st.index)

    def _start(self, st: BlockState, req: Request, t: float, enqueued: float, first: bool) -> None:
        mon = st.monitor
        mean = st.service_mean
        duration = mean if st.block.deterministic else st.service_rng.expovariate(1.0 / mean)
        self._seq += 1
        token = self._seq
        st.in_service[req.id] = (req, token, t)
        heapq.heappush(self._heap, Event(t + duration, SERVICE_END, token, st.index, (req.id, token)))
        if first and t >= self.warmup:
            mon.started += 1
            mon.wait_sum += t - enqueued
            if t > enqueued:
                mon.waited += 1
        if req.trace is not None:
            req.trace[-1][2] = t

    def _start_waiting(self, st: BlockState, t: float) -> None:
        self._touch(st, t)
        # a request whose deadline is now is dropped, not started
        dropped = timeout_sweep(st, t)
        if dropped and t >= self.warmup:
            st.monitor.dropped_timeout += len(dropped)
        while st.queue and len(st.in_service) < st.capacity:
            rid, (req, enq, exempt) = st.queue.popitem(last=False)
            self._start(st, req, t, enq, not exempt)

    def _on_service_end(self, st: BlockState, payload: tuple[int, int], t: float) -> None:
        rid, token = payload
        entry = st.in_service.get(rid)
        if entry is None or entry[1] != token:
            return  # preempted by a failure; service restarts later
        req = entry[0]
        mon = st.monitor
        self._touch(st, t)
        del st.in_service[rid]
        counted = t >= self.warmup
        if req.trace is not None:
            req.trace[-1][3] = t
        control = st.block.control
        if control is not None and control_check(req, control, st.control_rng) == "reject":
            if counted:
                mon.rejected_by_control += 1
        else:
            if counted:
                mon.served += 1
                if control is not None:
                    if req.defective:
                        mon.forwarded_defective += 1
                    else:
                        mon.forwarded_valid += 1
            succ = st.successors
            if not succ:
                if req.created_day >= self.warmup:
                    self.completed += 1
                    self.time_in_system_sum += t - req.created_day
            elif len(succ) == 1:
                self._enter(succ[0], req, t)
            else:
                self._enter(succ[int(st.route_rng.random() * len(succ))], req, t)
        self._start_waiting(st, t)

    def _on_timeout(self, st: BlockState, t: float) -> None:
        self._touch(st, t)
        dropped = timeout_sweep(st, t)
        if dropped:
            if t >= self.warmup:
                st.monitor.dropped_timeout += len(dropped)

    def _schedule_next_failure(self, st: BlockState) -> None:
        pair = next(st.failures, None)
        if pair is not None and pair[0] <= self.horizon:
            self._schedule(pair[0], FAILURE, st.index, pair[1])

    def _on_failure(self, st: BlockState, repair_time: float, t: float) -> None:
        mon = st.monitor
        self._touch(st, t)
        st.failed = True
        st.capacity = effective_capacity(st.block, True)
        if t >= self.warmup:
            mon.failures += 1
        excess = len(st.in_service) - st.capacity
        if excess > 0:
            for rid in list(st.in_service)[-excess:]:
                req, _, _ = st.in_service.pop(rid)
                st.queue[rid] = (req, t, True)
                st.queue.move_to_end(rid, last=False)
                if req.trace is not None:
                    req.trace[-1][2] = None
        mon.down_since = t
        self._schedule(repair_time, REPAIR, st.index)

    def _on_repair(self, st: BlockState, t: float) -> None:
        self._touch(st, t)
        st.failed = False
        st.capacity = st.block.capacity
        st.monitor.add_downtime(st.monitor.down_since, t)
        self._start_waiting(st, t)
        self._schedule_next_failure(st)


def simulate(model: ProcessModel, config: RunConfig | None = None) -> RunResult:
    """Run one replication. Same ``(model, config)`` gives an identical result."""
    return Simulation(model, config or RunConfig()).run()


def _run_one(args: tuple[ProcessModel, RunConfig]) -> RunResult:
    return simulate(*args)


def simulate_many(
    model: ProcessModel, configs: Sequence[RunConfig], n_jobs: int = 1
) -> list[RunResult]:
    """Independent replications, optionally in worker processes.

    Results come back in the order of ``configs`` regardless of ``n_jobs``.
    """
    jobs = [(model, c) for c in configs]
    if n_jobs <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_one, jobs))


def replication_configs(
    seed: int, replications: int, horizon_days: int | None = None
) -> list[RunConfig]:
    return [
        RunConfig(seed=seed, horizon_days=horizon_days, replication_index=i)
        for i in range(replications)
    ]
