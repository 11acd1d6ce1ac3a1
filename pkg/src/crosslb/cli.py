"""Command line entry points: run one scenario, sweep a grid, analyze a log.

    crosslb run <scenario> [--seed N] [--policy S] [--out DIR] [--no-cross-region]
    crosslb sweep <scenario> --grid <spec> [...]
    crosslb analyze <log.jsonl> [--cost-model <file>]

``<scenario>`` is a JSON file path or the name of a packaged preset
(``sp-comparison``, ``diurnal-offload``). A scenario with a ``grid`` section
runs every cell and emits one summary row per cell. Exit codes: 0 success,
2 invalid configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from importlib import resources
from typing import Any, Sequence

from . import simnet
from .metrics import CostModel, RunSummary, STRATEGIES, provisioning_cost, summarize
from .scenario import Scenario, ScenarioError, apply_override, parse_scenario, scenario_variants
from .workload import TraceError

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load_raw_scenario(ref: str) -> dict:
    if os.path.exists(ref):
        with open(ref, "r", encoding="utf-8") as f:
            try:
                return json.load(f)
            except json.JSONDecodeError as exc:
                raise ScenarioError("", f"{ref}: invalid JSON: {exc.msg} (line {exc.lineno})") from None
    preset = resources.files("crosslb").joinpath(f"presets/{ref}.json")
    if preset.is_file():
        return json.loads(preset.read_text(encoding="utf-8"))
    raise ScenarioError("", f"no scenario file or preset named {ref!r}")


def _scenario_name(ref: str) -> str:
    base = os.path.basename(ref)
    return base[:-5] if base.endswith(".json") else base


def _write_events(log: Sequence[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in log:
            f.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def _write_summary_json(summary: RunSummary, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")


def _cell_label(overrides: dict) -> str:
    if not overrides:
        return "run"
    parts = []
    for key in sorted(overrides):
        value = overrides[key]
        text = value if isinstance(value, str) else json.dumps(value, sort_keys=True)
        parts.append(f"{key}={text}")
    return ";".join(parts).replace("/", "_").replace(" ", "")


def _write_sweep_csv(rows: list[tuple[dict, RunSummary]], keys: list[str], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(keys) + list(RunSummary.CSV_FIELDS))
        for overrides, summary in rows:
            prefix = [
                overrides.get(k) if isinstance(overrides.get(k), (int, float, str))
                else json.dumps(overrides.get(k), sort_keys=True)
                for k in keys
            ]
            writer.writerow(prefix + summary.csv_row())


def _apply_cli_overrides(raw: dict, args: argparse.Namespace) -> None:
    if args.seed is not None:
        apply_override(raw, "seed", args.seed)
    if args.policy is not None:
        apply_override(raw, "policy", args.policy)
    if getattr(args, "no_cross_region", False):
        apply_override(raw, "cross_region", False)


def _execute_cells(scenario: Scenario, out_dir: str, grid: dict | None = None) -> int:
    os.makedirs(out_dir, exist_ok=True)
    cells = scenario_variants(scenario, grid)
    rows: list[tuple[dict, RunSummary]] = []
    keys = sorted({k for overrides, _ in cells for k in overrides})
    for overrides, cell in cells:
        result = simnet.run(cell)
        label = _cell_label(overrides)
        cell_dir = os.path.join(out_dir, label) if overrides else out_dir
        os.makedirs(cell_dir, exist_ok=True)
        _write_events(result.event_log, os.path.join(cell_dir, "events.jsonl"))
        _write_summary_json(result.summary, os.path.join(cell_dir, "summary.json"))
        rows.append((overrides, result.summary))
    _write_sweep_csv(rows, keys, os.path.join(out_dir, "summary.csv"))
    for overrides, summary in rows:
        label = _cell_label(overrides)
        print(
            f"{label}: completed={summary.completed} "
            f"tput={summary.throughput_rps:.3f}r/s "
            f"ttft_p90={summary.ttft.p90:.0f}ms hit={summary.kv_hit_rate:.3f}"
        )
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    raw = _load_raw_scenario(args.scenario)
    _apply_cli_overrides(raw, args)
    scenario = parse_scenario(raw)
    out_dir = args.out or os.path.join("runs", _scenario_name(args.scenario))
    return _execute_cells(scenario, out_dir)


def _parse_grid_spec(spec: str) -> dict[str, list]:
    grid: dict[str, list] = {}
    for axis in spec.split(";"):
        axis = axis.strip()
        if not axis:
            continue
        if "=" not in axis:
            raise ScenarioError("grid", f"axis {axis!r} must look like key=v1,v2")
        key, _, values = axis.partition("=")
        parsed = []
        for token in values.split(","):
            token = token.strip()
            try:
                parsed.append(json.loads(token))
            except json.JSONDecodeError:
                parsed.append(token)
        if not parsed:
            raise ScenarioError("grid", f"axis {key!r} has no values")
        grid[key.strip()] = parsed
    if not grid:
        raise ScenarioError("grid", "empty grid spec")
    return grid


def cmd_sweep(args: argparse.Namespace) -> int:
    raw = _load_raw_scenario(args.scenario)
    _apply_cli_overrides(raw, args)
    grid = _parse_grid_spec(args.grid) if args.grid else {}
    scenario = parse_scenario(raw)
    merged = dict(scenario.grid)
    merged.update(grid)
    if not merged:
        # Header-only CSV for an empty grid.
        out_dir = args.out or os.path.join("runs", _scenario_name(args.scenario))
        os.makedirs(out_dir, exist_ok=True)
        _write_sweep_csv([], [], os.path.join(out_dir, "summary.csv"))
        return 0
    # Validate the merged grid against the schema.
    probe = copy.deepcopy(scenario.raw)
    probe["grid"] = merged
    scenario = parse_scenario(probe)
    out_dir = args.out or os.path.join("runs", _scenario_name(args.scenario))
    return _execute_cells(scenario, out_dir, merged)


def _read_event_log(path: str) -> list[dict]:
    log = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                log.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ScenarioError("", f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
    return log


def _demand_series_from_log(log: list[dict], bucket_ms: int) -> dict[str, list[float]]:
    arrivals: dict[str, list[int]] = {}
    horizon = 0
    for record in log:
        horizon = max(horizon, record.get("ts", 0))
        if record.get("event") == "arrive":
            arrivals.setdefault(record["region"], []).append(record["ts"])
    buckets = max(1, -(-horizon // bucket_ms))
    series = {}
    for region in sorted(arrivals):
        counts = [0] * buckets
        for ts in arrivals[region]:
            counts[min(buckets - 1, ts // bucket_ms)] += 1
        series[region] = [c / (bucket_ms / 1000.0) for c in counts]
    return series


def cmd_analyze(args: argparse.Namespace) -> int:
    log = _read_event_log(args.log)
    summary = summarize(log)
    output: dict[str, Any] = {"summary": summary.to_dict()}
    if args.cost_model:
        with open(args.cost_model, "r", encoding="utf-8") as f:
            cfg = json.load(f)
        known = {"reserved_rate", "on_demand_rate", "replica_capacity", "bucket_ms"}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ScenarioError(f"cost-model.{unknown[0]}", "unknown field")
        bucket_ms = cfg.pop("bucket_ms", 3_600_000)
        model = CostModel(**cfg)
        demand = _demand_series_from_log(log, bucket_ms)
        if not demand:
            raise ScenarioError("", "log has no arrivals to build a demand series from")
        interval_hours = bucket_ms / 3_600_000.0
        output["provisioning"] = {
            strategy: {
                "cost": provisioning_cost(demand, strategy, model, interval_hours).cost,
                "replica_hours": provisioning_cost(
                    demand, strategy, model, interval_hours
                ).replica_hours,
            }
            for strategy in STRATEGIES
        }
    print(json.dumps(output, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crosslb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one scenario (or its built-in grid)")
    run_p.add_argument("scenario", help="scenario file path or preset name")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--policy", type=str, default=None, help="e.g. prefix/sp-p, ll/bp")
    run_p.add_argument("--out", type=str, default=None, help="artifact directory")
    run_p.add_argument("--no-cross-region", action="store_true", help="region-local mode")
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="run a parameter grid over one scenario")
    sweep_p.add_argument("scenario")
    sweep_p.add_argument("--grid", type=str, default="", help="e.g. 'seed=1,2;policy=rr/bp,ch/bp'")
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--policy", type=str, default=None)
    sweep_p.add_argument("--out", type=str, default=None)
    sweep_p.add_argument("--no-cross-region", action="store_true")
    sweep_p.set_defaults(func=cmd_sweep)

    an_p = sub.add_parser("analyze", help="summarize an event log")
    an_p.add_argument("log", help="events.jsonl produced by run/sweep")
    an_p.add_argument("--cost-model", type=str, default=None, help="cost model JSON file")
    an_p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, TraceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
