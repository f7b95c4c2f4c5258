"""Process models: domain types, the JSON model-file format, validation,
structural queries and re-engineering edits.

A process model is a queueing network. Sources emit requests into blocks,
blocks are multi-server service channels, routes are the arrows between
them. All model values are frozen dataclasses so they can be shared freely
between concurrent simulation runs.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping

import jsonschema

from fsbp import schemas

DEFAULT_PERIODIC_DAYS = 10.0
_UNSET: Any = object()


class ModelError(ValueError):
    """Base class for everything wrong with a model file or model value."""


class ModelSyntaxError(ModelError):
    def __init__(self, line: int, column: int, message: str):
        self.line = line
        self.column = column
        self.message = message
        super().__init__(f"syntax error at line {line}, column {column}: {message}")


class ModelSchemaError(ModelError):
    def __init__(self, field_path: str, constraint: str):
        self.field = field_path
        self.constraint = constraint
        super().__init__(f"schema violation at {field_path or '<root>'}: {constraint}")


class ModelReferenceError(ModelError):
    def __init__(self, ident: str, context: str):
        self.ident = ident
        super().__init__(f"unknown id {ident!r} ({context})")


class ModelValidationError(ModelError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))


class EditError(ModelError):
    pass


@dataclass(frozen=True)
class ControlParams:
    strictness: float

    def __post_init__(self) -> None:
        if not 0.0 < self.strictness < 1.0:
            raise ValueError(f"strictness must be in (0, 1), got {self.strictness}")


@dataclass(frozen=True)
class FailureProfile:
    failure_rate_per_day: float
    severity: float
    recovery_time_days: float

    def __post_init__(self) -> None:
        if self.failure_rate_per_day < 0:
            raise ValueError("failure_rate_per_day must be >= 0")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must be in [0, 1]")
        if self.recovery_time_days <= 0:
            raise ValueError("recovery_time_days must be > 0")


@dataclass(frozen=True)
class EmissionLimit:
    """At most ``max_count`` emissions in any rolling window of ``period_days``.

    ``period_days=None`` means the window is the whole run horizon.
    """

    max_count: int
    period_days: float | None = None

    def __post_init__(self) -> None:
        if self.max_count < 1:
            raise ValueError("max_count must be >= 1")
        if self.period_days is not None and self.period_days <= 0:
            raise ValueError("period_days must be > 0")


@dataclass(frozen=True)
class Block:
    id: str
    name: str
    service_time_days: float
    capacity: int = 1
    queue_limit: int | None = None
    timeout_days: float | None = None
    deterministic: bool = False
    control: ControlParams | None = None
    failure: FailureProfile | None = None
    note: str = ""

    def __post_init__(self) -> None:
        if self.service_time_days <= 0:
            raise ValueError(f"block {self.id}: service_time_days must be > 0")
        if self.capacity < 1:
            raise ValueError(f"block {self.id}: capacity must be >= 1")
        if self.queue_limit is not None and self.queue_limit < 1:
            raise ValueError(f"block {self.id}: queue_limit must be >= 1")
        if self.timeout_days is not None and self.timeout_days <= 0:
            raise ValueError(f"block {self.id}: timeout_days must be > 0")


@dataclass(frozen=True)
class Source:
    """A request generator.

    A positive ``intensity`` gives Poisson arrivals with that many requests
    per day on average. Intensity 0 is a deterministic periodic source that
    emits once every ``period_days``; ``period_days=None`` silences it.
    """

    id: str
    name: str
    intensity: float
    target: str
    emission_limit: EmissionLimit | None = None
    defect_rate: float = 0.0
    period_days: float | None = DEFAULT_PERIODIC_DAYS
    note: str = ""

    def __post_init__(self) -> None:
        if self.intensity < 0:
            raise ValueError(f"source {self.id}: intensity must be >= 0")
        if not 0.0 <= self.defect_rate <= 1.0:
            raise ValueError(f"source {self.id}: defect_rate must be in [0, 1]")
        if self.period_days is not None and self.period_days <= 0:
            raise ValueError(f"source {self.id}: period_days must be > 0")


@dataclass(frozen=True)
class Route:
    src: str
    dst: str


@dataclass(frozen=True)
class PrecedenceSpec:
    must_precede: tuple[tuple[str, str], ...] = ()
    must_parallel: tuple[tuple[str, str], ...] = ()

    @property
    def is_empty(self) -> bool:
        return not self.must_precede and not self.must_parallel


@dataclass(frozen=True)
class ProcessModel:
    name: str
    blocks: tuple[Block, ...]
    sources: tuple[Source, ...]
    routes: tuple[Route, ...]
    precedence: PrecedenceSpec | None = None
    horizon_days: int = 250
    warmup_days: int = 20
    note: str = ""

    def block(self, block_id: str) -> Block:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise ModelReferenceError(block_id, "no such block")

    def block_by_name(self, name: str) -> Block:
        for b in self.blocks:
            if b.name.lower() == name.lower():
                return b
        raise ModelReferenceError(name, "no block with that name")

    @property
    def block_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.blocks)

    def successors(self, node_id: str) -> tuple[str, ...]:
        return tuple(r.dst for r in self.routes if r.src == node_id)

    def predecessors(self, block_id: str) -> tuple[str, ...]:
        return tuple(r.src for r in self.routes if r.dst == block_id)

    def control_blocks(self) -> tuple[Block, ...]:
        return tuple(b for b in self.blocks if b.control is not None)

    def failing_blocks(self) -> tuple[Block, ...]:
        return tuple(b for b in self.blocks if b.failure is not None)

    def replace_block(self, block_id: str, **changes: Any) -> ProcessModel:
        self.block(block_id)
        blocks = tuple(replace(b, **changes) if b.id == block_id else b for b in self.blocks)
        return replace(self, blocks=blocks)


@dataclass(frozen=True)
class Diagnostic:
    severity: Literal["error", "warning"]
    subject: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.subject}: {self.message}"


# ---------------------------------------------------------------------------
# JSON <-> model


def _control_from(d: Mapping[str, Any] | None) -> ControlParams | None:
    return None if d is None else ControlParams(float(d["strictness"]))


def _failure_from(d: Mapping[str, Any] | None) -> FailureProfile | None:
    if d is None:
        return None
    return FailureProfile(
        float(d["failure_rate_per_day"]), float(d["severity"]), float(d["recovery_time_days"])
    )


def _limit_from(d: Mapping[str, Any] | None) -> EmissionLimit | None:
    if d is None:
        return None
    period = d.get("period_days")
    return EmissionLimit(int(d["max_count"]), None if period is None else float(period))


def _opt_float(v: Any) -> float | None:
    return None if v is None else float(v)


def model_from_dict(doc: Mapping[str, Any]) -> ProcessModel:
    """Build a model from an already-parsed JSON document.

    The document is checked against the published schema and for dangling
    references; other invariants are left to :func:`validate`.
    """
    try:
        schemas.check("model", doc)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path)
        raise ModelSchemaError(path, exc.message) from None

    try:
        blocks = tuple(
            Block(
                id=b["id"],
                name=b["name"],
                service_time_days=float(b["service_time_days"]),
                capacity=int(b["capacity"]),
                queue_limit=b.get("queue_limit"),
                timeout_days=_opt_float(b.get("timeout_days")),
                deterministic=bool(b.get("deterministic", False)),
                control=_control_from(b.get("control")),
                failure=_failure_from(b.get("failure")),
                note=b.get("note", ""),
            )
            for b in doc["blocks"]
        )
        sources = tuple(
            Source(
                id=s["id"],
                name=s["name"],
                intensity=float(s["intensity"]),
                target=s["target"],
                emission_limit=_limit_from(s.get("emission_limit")),
                defect_rate=float(s.get("defect_rate", 0.0)),
                period_days=_opt_float(s.get("period_days", DEFAULT_PERIODIC_DAYS)),
                note=s.get("note", ""),
            )
            for s in doc["sources"]
        )
    except ValueError as exc:
        raise ModelSchemaError("", str(exc)) from None

    routes = [Route(r["from"], r["to"]) for r in doc["routes"]]
    # a source's target implies its route; add it when the file leaves it out
    for s in sources:
        if Route(s.id, s.target) not in routes:
            routes.append(Route(s.id, s.target))

    precedence = None
    if doc.get("precedence") is not None:
        p = doc["precedence"]
        precedence = PrecedenceSpec(
            must_precede=tuple((a, b) for a, b in p.get("must_precede", [])),
            must_parallel=tuple((a, b) for a, b in p.get("must_parallel", [])),
        )

    model = ProcessModel(
        name=doc["name"],
        blocks=blocks,
        sources=sources,
        routes=tuple(routes),
        precedence=precedence,
        horizon_days=int(doc["horizon_days"]),
        warmup_days=int(doc["warmup_days"]),
        note=doc.get("note", ""),
    )
    _check_references(model)
    return model


def _check_references(model: ProcessModel) -> None:
    block_ids = set(model.block_ids)
    node_ids = block_ids | {s.id for s in model.sources}
    for s in model.sources:
        if s.target not in block_ids:
            raise ModelReferenceError(s.target, f"target of source {s.id}")
    for r in model.routes:
        if r.src not in node_ids:
            raise ModelReferenceError(r.src, f"route {r.src} -> {r.dst}")
        if r.dst not in block_ids:
            raise ModelReferenceError(r.dst, f"route {r.src} -> {r.dst}")
    if model.precedence is not None:
        for a, b in model.precedence.must_precede + model.precedence.must_parallel:
            for ident in (a, b):
                if ident not in block_ids:
                    raise ModelReferenceError(ident, "precedence constraint")


def parse_model(text: str) -> ProcessModel:
    """Parse model-file contents into a validated :class:`ProcessModel`.

    Raises :class:`ModelSyntaxError`, :class:`ModelSchemaError`,
    :class:`ModelReferenceError` or :class:`ModelValidationError`.
    Warnings from :func:`validate` do not prevent parsing.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelSyntaxError(exc.lineno, exc.colno, exc.msg) from None
    model = model_from_dict(doc)
    errors = [d for d in validate(model) if d.severity == "error"]
    if errors:
        raise ModelValidationError(errors)
    return model


def load_model(path: str | Path) -> ProcessModel:
    return parse_model(Path(path).read_text(encoding="utf-8"))


def model_to_dict(model: ProcessModel) -> dict[str, Any]:
    def block(b: Block) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": b.id,
            "name": b.name,
            "service_time_days": b.service_time_days,
            "capacity": b.capacity,
            "queue_limit": b.queue_limit,
            "timeout_days": b.timeout_days,
            "deterministic": b.deterministic,
            "control": None if b.control is None else {"strictness": b.control.strictness},
            "failure": None
            if b.failure is None
            else {
                "failure_rate_per_day": b.failure.failure_rate_per_day,
                "severity": b.failure.severity,
                "recovery_time_days": b.failure.recovery_time_days,
            },
        }
        if b.note:
            d["note"] = b.note
        return d

    def source(s: Source) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": s.id,
            "name": s.name,
            "intensity": s.intensity,
            "target": s.target,
            "emission_limit": None
            if s.emission_limit is None
            else {
                "max_count": s.emission_limit.max_count,
                "period_days": s.emission_limit.period_days,
            },
            "defect_rate": s.defect_rate,
            "period_days": s.period_days,
        }
        if s.note:
            d["note"] = s.note
        return d

    doc: dict[str, Any] = {"name": model.name}
    if model.note:
        doc["note"] = model.note
    doc.update(
        horizon_days=model.horizon_days,
        warmup_days=model.warmup_days,
        blocks=[block(b) for b in model.blocks],
        sources=[source(s) for s in model.sources],
        routes=[{"from": r.src, "to": r.dst} for r in model.routes],
        precedence=None
        if model.precedence is None
        else {
            "must_precede": [list(p) for p in model.precedence.must_precede],
            "must_parallel": [list(p) for p in model.precedence.must_parallel],
        },
    )
    return doc


def serialize_model(model: ProcessModel) -> str:
    return json.dumps(model_to_dict(model), indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# structure


def block_graph(model: ProcessModel) -> dict[str, list[str]]:
    """Adjacency lists over blocks only (routes from sources are ignored)."""
    graph: dict[str, list[str]] = {b.id: [] for b in model.blocks}
    for r in model.routes:
        if r.src in graph and r.dst in graph:
            graph[r.src].append(r.dst)
    return graph


def reachable_from(graph: Mapping[str, Iterable[str]], start: Iterable[str]) -> set[str]:
    """Nodes reachable from *start* by one or more edges."""
    seen: set[str] = set()
    todo = deque(n for s in start for n in graph.get(s, ()))
    while todo:
        node = todo.popleft()
        if node in seen:
            continue
        seen.add(node)
        todo.extend(graph.get(node, ()))
    return seen


def _has_cycle(pairs: Iterable[tuple[str, str]]) -> bool:
    graph: dict[str, list[str]] = {}
    for a, b in pairs:
        graph.setdefault(a, []).append(b)
    return any(node in reachable_from(graph, [node]) for node in graph)


def count_inputs(model: ProcessModel, block_id: str) -> int:
    """Number of routes (from sources or blocks) entering ``block_id``."""
    model.block(block_id)
    return sum(1 for r in model.routes if r.dst == block_id)


def validate(model: ProcessModel) -> list[Diagnostic]:
    """Check model invariants. Returns an empty list for a clean model.

    Unreachable blocks and blocks that cannot reach an exit are warnings;
    everything else is an error.
    """
    out: list[Diagnostic] = []

    def error(subject: str, message: str) -> None:
        out.append(Diagnostic("error", subject, message))

    seen: set[str] = set()
    reported: set[str] = set()
    for ident in [b.id for b in model.blocks] + [s.id for s in model.sources]:
        if ident in seen and ident not in reported:
            error(ident, "duplicate id")
            reported.add(ident)
        seen.add(ident)

    if not model.horizon_days > model.warmup_days >= 0:
        error(model.name, "require horizon_days > warmup_days >= 0")

    block_ids = set(model.block_ids)
    source_ids = {s.id for s in model.sources}
    seen_routes: set[Route] = set()
    for r in model.routes:
        label = f"{r.src} -> {r.dst}"
        if r.src not in block_ids | source_ids:
            error(r.src, f"route {label} starts at an unknown id")
        if r.dst not in block_ids:
            error(r.dst, f"route {label} ends at an unknown block")
        if r.src == r.dst:
            error(r.src, f"self-loop {label}")
        if r in seen_routes:
            error(r.src, f"duplicate route {label}")
        seen_routes.add(r)

    for s in model.sources:
        if s.target not in block_ids:
            error(s.target, f"target of source {s.id} is not a block")
            continue
        outs = model.successors(s.id)
        if outs != (s.target,):
            error(s.id, f"source must have exactly one route, to its target {s.target}")

    if model.precedence is not None:
        pairs = model.precedence.must_precede + model.precedence.must_parallel
        for a, b in pairs:
            for ident in (a, b):
                if ident not in block_ids:
                    error(ident, "precedence constraint names an unknown block")
        if _has_cycle(model.precedence.must_precede):
            error(model.name, "must_precede constraints are cyclic")

    if not any(d.severity == "error" for d in out):
        graph = block_graph(model)
        fed = {s.target for s in model.sources}
        reachable = fed | reachable_from(graph, fed)
        for b in model.blocks:
            if b.id not in reachable:
                out.append(Diagnostic("warning", b.id, "block is not reachable from any source"))
        exits = {b for b, succ in graph.items() if not succ}
        reverse: dict[str, list[str]] = {b: [] for b in graph}
        for a, succ in graph.items():
            for b in succ:
                reverse[b].append(a)
        can_exit = exits | reachable_from(reverse, exits)
        for b in model.blocks:
            if b.id not in can_exit:
                out.append(Diagnostic("warning", b.id, "requests entering this block never leave"))
    return out


# ---------------------------------------------------------------------------
# re-engineering edits


@dataclass(frozen=True)
class EditOp:
    """One edit operation.

    ``op`` is one of ``remove_block``, ``add_route``, ``remove_route``,
    ``reorder`` or ``add_precedence``. Unused fields stay empty.
    """

    op: str
    block: str = ""
    src: str = ""
    dst: str = ""
    after: str = ""
    reroute: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class EditScript:
    operations: tuple[EditOp, ...] = ()
    description: str = ""


def edit_from_dict(doc: Mapping[str, Any]) -> EditScript:
    try:
        schemas.check("edit", doc)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path)
        raise ModelSchemaError(path, exc.message) from None
    ops = []
    for o in doc.get("operations", []):
        ops.append(
            EditOp(
                op=o["op"],
                block=o.get("block", ""),
                src=o.get("from", o.get("earlier", "")),
                dst=o.get("to", o.get("later", "")),
                after=o.get("after", ""),
                reroute=tuple(sorted(o.get("reroute", {}).items())),
            )
        )
    return EditScript(tuple(ops), doc.get("description", ""))


def parse_edit(text: str) -> EditScript:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelSyntaxError(exc.lineno, exc.colno, exc.msg) from None
    return edit_from_dict(doc)


def apply_edit(model: ProcessModel, edit: EditScript) -> ProcessModel:
    """Return a new model with the edit operations applied in order.

    Removing a block drops every route touching it. Routes that entered the
    removed block are redirected only through the explicit ``reroute`` map,
    and sources feeding it must be covered by that map. Duplicate routes
    produced by rerouting are merged.
    """
    blocks = list(model.blocks)
    sources = list(model.sources)
    routes = list(model.routes)
    precedence = model.precedence

    def known_block(ident: str) -> None:
        if ident not in {b.id for b in blocks}:
            raise ModelReferenceError(ident, "edit references an unknown block")

    def known_node(ident: str) -> None:
        if ident not in {b.id for b in blocks} | {s.id for s in sources}:
            raise ModelReferenceError(ident, "edit references an unknown id")

    def add(route: Route) -> None:
        if route.src == route.dst:
            raise EditError(f"edit would create self-loop on {route.src}")
        if route not in routes:
            routes.append(route)

    for op in edit.operations:
        if op.op == "remove_block":
            known_block(op.block)
            reroute = dict(op.reroute)
            for old, new in reroute.items():
                known_block(old)
                known_block(new)
            incoming = [r for r in routes if r.dst == op.block]
            routes = [r for r in routes if op.block not in (r.src, r.dst)]
            blocks = [b for b in blocks if b.id != op.block]
            if op.block in reroute:
                for r in incoming:
                    if r.src != reroute[op.block]:
                        add(Route(r.src, reroute[op.block]))
            if precedence is not None:
                precedence = PrecedenceSpec(
                    tuple(p for p in precedence.must_precede if op.block not in p),
                    tuple(p for p in precedence.must_parallel if op.block not in p),
                )
        elif op.op == "add_route":
            known_node(op.src)
            known_block(op.dst)
            add(Route(op.src, op.dst))
        elif op.op == "remove_route":
            if Route(op.src, op.dst) not in routes:
                raise EditError(f"no route {op.src} -> {op.dst} to remove")
            routes.remove(Route(op.src, op.dst))
        elif op.op == "reorder":
            routes = _reorder(routes, {b.id for b in blocks}, op.block, op.after, known_block)
        elif op.op == "add_precedence":
            known_block(op.src)
            known_block(op.dst)
            current = precedence or PrecedenceSpec()
            pairs = current.must_precede + ((op.src, op.dst),)
            if _has_cycle(pairs):
                raise EditError(f"precedence {op.src} -> {op.dst} creates a cycle")
            precedence = replace(current, must_precede=pairs)
        else:
            raise EditError(f"unknown edit operation {op.op!r}")

    block_ids = {b.id for b in blocks}
    new_sources = []
    for s in sources:
        outs = [r.dst for r in routes if r.src == s.id]
        if not outs:
            raise EditError(f"edit leaves source {s.id} without a target")
        if len(outs) > 1:
            raise EditError(f"edit gives source {s.id} more than one target: {outs}")
        if outs[0] not in block_ids:
            raise EditError(f"source {s.id} targets removed block {outs[0]}")
        new_sources.append(s if s.target == outs[0] else replace(s, target=outs[0]))

    edited = replace(
        model,
        blocks=tuple(blocks),
        sources=tuple(new_sources),
        routes=tuple(routes),
        precedence=precedence,
    )
    errors = [d for d in validate(edited) if d.severity == "error"]
    if errors:
        raise EditError("edit produces an invalid model: " + "; ".join(map(str, errors)))
    return edited


def _reorder(routes: list[Route], block_ids: set[str], block: str, after: str, known) -> list[Route]:
    # Splice ``block`` out of the block-to-block chain, then insert it
    # directly behind ``after``. Source routes into ``block`` are kept.
    known(block)
    known(after)
    if block == after:
        raise EditError("cannot reorder a block after itself")
    preds = [r.src for r in routes if r.dst == block and r.src in block_ids]
    succs = [r.dst for r in routes if r.src == block]
    out = [r for r in routes if not (r.src == block or (r.dst == block and r.src in block_ids))]
    for p in preds:
        for s in succs:
            if p != s and Route(p, s) not in out:
                out.append(Route(p, s))
    after_succs = [r.dst for r in out if r.src == after]
    out = [r for r in out if r.src != after]
    out.append(Route(after, block))
    for s in after_succs:
        if s != block and Route(block, s) not in out:
            out.append(Route(block, s))
    return out
