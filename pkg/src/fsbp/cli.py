"""Command-line entry point.

Exit status: 0 on success, 1 for domain errors (invalid model, failed
expectation, mismatched runs), 2 for usage and I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from fsbp import __version__
from fsbp.engine import SimulationError, replication_configs, simulate_many
from fsbp.indicators import IndicatorError, SWEEP_COLUMNS, ControlWeights, assess, optimize_control
from fsbp.metrics import (
    ComparisonError,
    RunResult,
    aggregate,
    compare,
    dump_json,
    export_series,
    render_comparison,
    render_run_table,
    result_from_dict,
)
from fsbp.model import ModelError, ModelValidationError, parse_model, validate
from fsbp.scenarios import UnknownScenarioError, list_scenarios, render_checklist, run_scenario

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
DEFAULT_OUT = "./out"


class UsageError(Exception):
    """Bad input files or arguments detected after parsing."""


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(os.environ.get("FSBP_OUT_DIR") or args.out)


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror or exc}") from None


def _write(out: Path, name: str, text: str) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
        p = out / name
        with p.open("w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise UsageError(f"cannot write {out / name}: {exc.strerror or exc}") from None
    return p


def _header(command: str, args: argparse.Namespace, **extra: Any) -> str:
    parts = [f"fsbp {__version__} {command}"]
    for key in ("seed", "replications"):
        if hasattr(args, key):
            parts.append(f"{key}={getattr(args, key)}")
    parts += [f"{k}={v}" for k, v in extra.items()]
    if hasattr(args, "out"):
        parts.append(f"out={_out_dir(args)}")
    return "# " + " ".join(parts)


def _emit(args: argparse.Namespace, header: str, doc: Any, text: str, rows: list[list[Any]] | None = None) -> None:
    """Print the report to stdout in the requested format.

    The provenance header goes to stdout for text and to stderr otherwise,
    so json and csv output stays machine-readable.
    """
    if args.format == "json":
        _err(header)
        sys.stdout.write(dump_json(doc))
    elif args.format == "csv":
        _err(header)
        sys.stdout.write(_csv_text(rows or []))
    else:
        sys.stdout.write(header + "\n" + text)


def _csv_text(rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    return buf.getvalue()


def _load(path: str):
    return parse_model(_read_text(path))


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args: argparse.Namespace) -> int:
    text = _read_text(args.model)
    try:
        diags = validate(parse_model(text))
    except ModelValidationError as exc:
        diags = list(exc.diagnostics)
    except ModelError as exc:
        _err(f"error: {args.model}: {exc}")
        if args.format == "json":
            sys.stdout.write(dump_json({"kind": "diagnostics", "path": args.model, "valid": False, "diagnostics": [
                {"severity": "error", "subject": args.model, "message": str(exc)}]}))
        return EXIT_DOMAIN
    for d in diags:
        _err(str(d))
    ok = not any(d.severity == "error" for d in diags)
    doc = {
        "kind": "diagnostics",
        "path": args.model,
        "valid": ok,
        "diagnostics": [{"severity": d.severity, "subject": d.subject, "message": d.message} for d in diags],
    }
    if args.format == "json":
        sys.stdout.write(dump_json(doc))
    elif args.format == "csv":
        sys.stdout.write(_csv_text([["severity", "subject", "message"]] + [[d.severity, d.subject, d.message] for d in diags]))
    else:
        print(f"{args.model}: {'valid' if ok else 'invalid'}")
    return EXIT_OK if ok else EXIT_DOMAIN


def _block_rows(result) -> list[list[Any]]:
    rows = [["block_id", "name", "avg_queue_length", "dropped_timeout", "dropped_capacity", "utilization"]]
    for b in result.blocks:
        if isinstance(result, RunResult):
            vals = [b.avg_queue_length, b.dropped_timeout, b.dropped_capacity, b.utilization]
        else:
            vals = [b.metrics[m].mean for m in ("avg_queue_length", "dropped_timeout", "dropped_capacity", "utilization")]
        rows.append([b.block_id, b.name, *vals])
    return rows


def cmd_simulate(args: argparse.Namespace) -> int:
    model = _load(args.model)
    if args.replications < 1:
        raise UsageError("--replications must be >= 1")
    configs = replication_configs(args.seed, args.replications, args.horizon)
    results = simulate_many(model, configs, args.jobs)
    out = _out_dir(args)
    if len(results) == 1:
        report = results[0]
    else:
        report = aggregate(results)
    _write(out, "result.json", dump_json(report.to_dict()))
    try:
        export_series(results[0], out)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    text = render_run_table(report)
    _write(out, "report.txt", text)
    _emit(args, _header("simulate", args, model=model.name), report.to_dict(), text, _block_rows(report))
    return EXIT_OK


def _load_result(path: str):
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not JSON: {exc}") from None
    try:
        return result_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: not a run result: {exc}") from None


def cmd_compare(args: argparse.Namespace) -> int:
    before, after = _load_result(args.before), _load_result(args.after)
    report = compare(before, after, args.threshold)
    out = _out_dir(args)
    text = render_comparison(report)
    _write(out, "comparison.json", dump_json(report.to_dict()))
    _write(out, "comparison.txt", text)
    rows = [["block", "metric", "before", "after", "delta_percent", "verdict", "text"]]
    rows += [[r.block, r.metric, r.before, r.after, r.delta_percent, r.verdict, r.text] for r in report.rows]
    _emit(args, _header("compare", args, before=args.before, after=args.after), report.to_dict(), text, rows)
    return EXIT_OK


def _render_assessment(a) -> str:
    lines = []
    for group in ("S", "O", "L"):
        scores = getattr(a, group)
        lines.append(f"{group}:" if scores else f"{group}: (none)")
        for s in scores:
            lines.append(f"  {s.name:<18} {s.value:<4g} {s.label:<14} {s.evidence}")
    lines += [f"note: {n}" for n in a.notes]
    return "\n".join(lines) + "\n"


def cmd_assess(args: argparse.Namespace) -> int:
    model = _load(args.model)
    legal: list[dict[str, Any]] = []
    extra_notes: list[str] = []
    if args.legal:
        if not Path(args.legal).is_file():
            _err(f"warning: legal indicator file {args.legal} not found; L left empty")
            extra_notes.append(f"legal indicator file not found: {args.legal}")
        else:
            try:
                legal = json.loads(_read_text(args.legal))
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.legal}: not JSON: {exc}") from None
            if isinstance(legal, dict):
                legal = legal.get("L", [])
            if not isinstance(legal, list):
                raise UsageError(f"{args.legal}: expected a list of indicators")
    a = assess(model, legal, replications=args.runs, seed=args.seed)
    if extra_notes:
        a = type(a)(a.S, a.O, a.L, a.notes + tuple(extra_notes))
    out = _out_dir(args)
    text = _render_assessment(a)
    _write(out, "assessment.json", dump_json(a.to_dict()))
    rows = [["group", "name", "value", "label", "evidence", "provenance"]]
    rows += [[g, s.name, s.value, s.label, s.evidence, s.provenance] for g in "SOL" for s in getattr(a, g)]
    _emit(args, _header("assess", args, runs=args.runs), a.to_dict(), text, rows)
    return EXIT_OK


def _parse_grid(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --grid {text!r}: expected comma-separated numbers") from None
    if not values:
        raise UsageError("empty --grid")
    return values


def _render_sweep(sweep) -> str:
    cols = ("block_id", "strictness", "utilization", "avg_queue_length", "forwarded_valid",
            "forwarded_defective", "dropped_timeout", "objective")
    rows = [list(cols)]
    for r in sweep.rows:
        cells = [r.block_id] + [f"{getattr(r, c):.4g}" for c in cols[1:]]
        rows.append(cells + (["*"] if r.is_best else []))
    widths = [max(len(row[i]) for row in rows) for i in range(len(cols))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) + ("  *" if len(row) > len(cols) else "")
             for row in rows]
    lines = [ln.rstrip() for ln in lines]
    best = ", ".join(f"{k}={v:g}" for k, v in sweep.best.items())
    lines.append(f"best: {best} (objective {sweep.objectives[sweep.best_index]:.4g}, marked *)")
    return "\n".join(lines) + "\n"


def cmd_sweep(args: argparse.Namespace) -> int:
    model = _load(args.model)
    grid = _parse_grid(args.grid)
    if args.blocks:
        blocks = [b.strip() for b in args.blocks.split(",") if b.strip()]
    else:
        blocks = [b.id for b in model.control_blocks()]
    weights = ControlWeights(bad=args.w_bad, drop=args.w_drop)
    sweep = optimize_control(model, blocks, grid, seed=args.seed, replications=args.replications,
                             horizon_days=args.horizon, weights=weights, n_jobs=args.jobs)
    rows = [list(SWEEP_COLUMNS)] + [[getattr(r, c) for c in SWEEP_COLUMNS] for r in sweep.rows]
    out = _out_dir(args)
    _write(out, "sweep.csv", _csv_text(rows))
    _write(out, "sweep.json", dump_json(sweep.to_dict()))
    _emit(args, _header("sweep", args, grid=args.grid), sweep.to_dict(), _render_sweep(sweep), rows)
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise UsageError(f"bad --seeds {text!r}: expected e.g. 1-50 or 3,7,11") from None
    if not seeds:
        raise UsageError("empty --seeds")
    return seeds


def cmd_scenario(args: argparse.Namespace) -> int:
    if args.list:
        items = list_scenarios()
        doc = {"kind": "scenario_list", "scenarios": [{"id": i, "description": d} for i, d in items]}
        if args.format == "json":
            sys.stdout.write(dump_json(doc))
        elif args.format == "csv":
            sys.stdout.write(_csv_text([["id", "description"], *map(list, items)]))
        else:
            for i, d in items:
                print(f"{i:<20} {d}")
        return EXIT_OK
    if not args.id:
        raise UsageError("scenario id required (or --list)")
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    report = run_scenario(args.id, seeds, failures=not args.no_failures, n_jobs=args.jobs)
    out = _out_dir(args)
    checklist = render_checklist(report)
    text = checklist
    if report.comparison is not None:
        text += "\n" + render_comparison(report.comparison)
    _write(out, "report.json", dump_json(report.to_dict()))
    _write(out, "checklist.txt", checklist)
    rows = [["effect", "status"]] + [[c.effect.id, c.status] for c in report.checks]
    header = _header("scenario", args, id=args.id, seeds=f"{report.seeds[0]}..{report.seeds[-1]}",
                     replications=len(report.seeds))
    _emit(args, header, report.to_dict(), text, rows)
    return EXIT_OK if report.passed else EXIT_DOMAIN


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, *, seed: bool = True) -> None:
    if seed:
        p.add_argument("--seed", type=int, default=1, help="base seed (default 1)")
    p.add_argument("--out", default=DEFAULT_OUT, help="output directory (default ./out; FSBP_OUT_DIR overrides)")
    p.add_argument("--format", choices=("json", "csv", "text"), default="text", help="stdout format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsbp", description="Business process simulation and stability scoring.")
    parser.add_argument("--version", action="version", version=f"fsbp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("validate", help="check a model file")
    p.add_argument("model")
    p.add_argument("--format", choices=("json", "csv", "text"), default="text")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="run replications of a model")
    p.add_argument("model")
    _common(p)
    p.add_argument("--replications", type=int, default=30, help="default 30; 1 writes a single run")
    p.add_argument("--horizon", type=int, default=None, help="override the model horizon (days)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="compare two result files")
    p.add_argument("before")
    p.add_argument("after")
    _common(p, seed=False)
    p.add_argument("--threshold", type=float, default=1.0, help="'Unchanged' band in percent")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("assess", help="score the stability indicators")
    p.add_argument("model")
    _common(p)
    p.add_argument("--runs", type=int, default=0, help="replications for organizational scores (0 skips them)")
    p.add_argument("--legal", default=None, help="JSON list of externally supplied legal indicators")
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("sweep", help="grid search over control strictness")
    p.add_argument("model")
    _common(p)
    p.add_argument("--blocks", default=None, help="comma-separated control block ids (default: all)")
    p.add_argument("--grid", default="0.1,0.5,0.9")
    p.add_argument("--runs", "--replications", dest="replications", type=int, default=30)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--w-bad", type=float, default=1.0)
    p.add_argument("--w-drop", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("scenario", help="run a shipped scenario")
    p.add_argument("id", nargs="?")
    _common(p, seed=False)
    p.add_argument("--seeds", default=None, help="e.g. 1-50 or 3,7,11 (default: the scenario's own)")
    p.add_argument("--list", action="store_true", help="list scenario ids")
    p.add_argument("--no-failures", action="store_true", help="strip failure profiles")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_scenario)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except UsageError as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    except ModelValidationError as exc:
        for d in exc.diagnostics:
            _err(str(d))
        return EXIT_DOMAIN
    except UnknownScenarioError as exc:
        _err(f"error: {exc}")
        return EXIT_DOMAIN
    except (ModelError, ComparisonError, IndicatorError, SimulationError, ValueError) as exc:
        _err(f"error: {exc}")
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
