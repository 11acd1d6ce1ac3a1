"""Scenario files: strict schema, validation, and override plumbing.

A scenario is a JSON object; unknown fields anywhere are rejected and every
validation error carries the dotted path of the offending field. See
README for the full schema. ``grid`` (optional) declares sweep axes as
dotted field paths mapped to lists of values.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

from .balancer import DEFAULT_PROBE_INTERVAL_MS, DEFAULT_QUEUE_BUFFER_TAU
from .policy import PolicyKind, parse_policy
from .replica import ReplicaConfig
from .workload import (
    ConversationSpec,
    DiurnalRegion,
    DiurnalSpec,
    LengthDist,
    TreeSpec,
)

DEFAULT_INTRA_MS = 1
DEFAULT_INTER_MS = 150
# One-way halves of plausible cross-region RTTs, capped at 200 ms.
DEFAULT_PAIR_LATENCIES = {
    ("asia", "us"): 180,
    ("eu", "us"): 150,
    ("asia", "eu"): 200,
}


class ScenarioError(ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.field_path = path


@dataclass(frozen=True)
class LatencyMatrix:
    """Symmetric region-to-region one-way delays; diagonal is intra-region."""

    delays: Mapping[tuple[str, str], int]

    def latency(self, a: str, b: str) -> int:
        return self.delays[(a, b)] if a <= b else self.delays[(b, a)]

    @staticmethod
    def build(
        regions: list[str],
        intra_ms: int = DEFAULT_INTRA_MS,
        pairs: Mapping[tuple[str, str], int] | None = None,
        default_inter_ms: int = DEFAULT_INTER_MS,
    ) -> "LatencyMatrix":
        delays: dict[tuple[str, str], int] = {}
        given = {}
        for (a, b), ms in (pairs or {}).items():
            given[(a, b) if a <= b else (b, a)] = ms
        defaults = {k if k[0] <= k[1] else (k[1], k[0]): v for k, v in DEFAULT_PAIR_LATENCIES.items()}
        for i, a in enumerate(regions):
            delays[(a, a)] = intra_ms
            for b in regions[i + 1 :]:
                key = (a, b) if a <= b else (b, a)
                delays[key] = given.get(key, defaults.get(key, default_inter_ms))
        for key, ms in delays.items():
            if ms < 0:
                raise ScenarioError("latency", f"negative delay for {key}")
        return LatencyMatrix(delays=delays)


@dataclass(frozen=True)
class FailureSpec:
    region: str
    at_ms: int
    recover_at_ms: int


@dataclass
class Scenario:
    regions: list[str]
    latency: LatencyMatrix
    replicas_per_region: dict[str, int]
    replica_config: ReplicaConfig
    policy: PolicyKind
    cross_region: bool
    probe_interval_ms: int
    queue_buffer_tau: int
    trie_max_size: int
    snapshot_trie_max_size: int | None
    vnodes_per_target: int
    workload_kind: str
    workload: ConversationSpec | TreeSpec | DiurnalSpec | None
    trace_path: str | None
    failures: list[FailureSpec]
    seed: int
    horizon_ms: int
    grid: dict[str, list] = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _expect(obj: Mapping, path: str, allowed: set[str], required: set[str]) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ScenarioError(_join(path, unknown[0]), "unknown field")
    missing = sorted(required - set(obj))
    if missing:
        raise ScenarioError(_join(path, missing[0]), "required field missing")


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _typed(obj: Mapping, path: str, key: str, kind: type, default: Any = ...) -> Any:
    if key not in obj:
        if default is ...:
            raise ScenarioError(_join(path, key), "required field missing")
        return default
    value = obj[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ScenarioError(_join(path, key), f"expected {kind.__name__}")
    return value


def _parse_dist(obj: Any, path: str) -> LengthDist:
    if not isinstance(obj, dict):
        raise ScenarioError(path, "expected an object")
    kind = _typed(obj, path, "kind", str)
    try:
        if kind == "fixed":
            _expect(obj, path, {"kind", "value"}, {"kind", "value"})
            return LengthDist.fixed(_typed(obj, path, "value", int))
        if kind == "uniform":
            _expect(obj, path, {"kind", "low", "high"}, {"kind", "low", "high"})
            return LengthDist.uniform(_typed(obj, path, "low", int), _typed(obj, path, "high", int))
        if kind == "lognormal":
            _expect(obj, path, {"kind", "mu", "sigma", "min", "max"}, {"kind", "mu", "sigma"})
            return LengthDist.lognormal(
                _typed(obj, path, "mu", float),
                _typed(obj, path, "sigma", float),
                min_value=_typed(obj, path, "min", int, 1),
                max_value=_typed(obj, path, "max", int, 1 << 20),
            )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(path, str(exc)) from None
    raise ScenarioError(_join(path, "kind"), f"unknown distribution {kind!r}")


def _parse_clients(obj: Any, path: str, regions: list[str]) -> dict[str, int]:
    if not isinstance(obj, dict) or not obj:
        raise ScenarioError(path, "expected a non-empty region->count object")
    out: dict[str, int] = {}
    for region, count in obj.items():
        if region not in regions:
            raise ScenarioError(_join(path, region), "unknown region")
        if not isinstance(count, int) or isinstance(count, bool) or count < 0:
            raise ScenarioError(_join(path, region), "expected a non-negative integer")
        out[region] = count
    return out


def _parse_workload(obj: Any, regions: list[str]) -> tuple[str, Any, str | None]:
    path = "workload"
    if not isinstance(obj, dict):
        raise ScenarioError(path, "expected an object")
    kind = _typed(obj, path, "kind", str)
    if kind == "conversations":
        allowed = {
            "kind", "clients", "turns", "new_tokens", "output_tokens",
            "shared_prefix_len", "burst_k", "conversations_per_client", "start_spread_ms",
        }
        _expect(obj, path, allowed, {"kind", "clients"})
        spec = ConversationSpec(
            clients_per_region=_parse_clients(obj["clients"], _join(path, "clients"), regions),
            turns=_parse_dist(obj["turns"], _join(path, "turns")) if "turns" in obj else ConversationSpec.__dataclass_fields__["turns"].default_factory(),
            new_tokens=_parse_dist(obj["new_tokens"], _join(path, "new_tokens")) if "new_tokens" in obj else ConversationSpec.__dataclass_fields__["new_tokens"].default_factory(),
            output_tokens=_parse_dist(obj["output_tokens"], _join(path, "output_tokens")) if "output_tokens" in obj else ConversationSpec.__dataclass_fields__["output_tokens"].default_factory(),
            shared_prefix_len=_typed(obj, path, "shared_prefix_len", int, 16),
            burst_k=_typed(obj, path, "burst_k", int, 1),
            conversations_per_client=_typed(obj, path, "conversations_per_client", int, 1),
            start_spread_ms=_typed(obj, path, "start_spread_ms", int, 1000),
        )
        return kind, spec, None
    if kind == "tot":
        allowed = {
            "kind", "clients", "branching", "depth", "trees_per_client",
            "question_tokens", "thought_tokens", "output_tokens", "start_spread_ms",
        }
        _expect(obj, path, allowed, {"kind", "clients"})
        branching: int | dict[str, int] = obj.get("branching", 2)
        if isinstance(branching, dict):
            branching = _parse_clients(branching, _join(path, "branching"), regions)
            for region, b in branching.items():
                if b < 1:
                    raise ScenarioError(_join(path, f"branching.{region}"), "must be >= 1")
        elif not isinstance(branching, int) or isinstance(branching, bool) or branching < 1:
            raise ScenarioError(_join(path, "branching"), "expected int >= 1 or region map")
        spec = TreeSpec(
            clients_per_region=_parse_clients(obj["clients"], _join(path, "clients"), regions),
            branching=branching,
            depth=_typed(obj, path, "depth", int, 4),
            trees_per_client=_typed(obj, path, "trees_per_client", int, 1),
            question_tokens=_parse_dist(obj["question_tokens"], _join(path, "question_tokens")) if "question_tokens" in obj else TreeSpec.__dataclass_fields__["question_tokens"].default_factory(),
            thought_tokens=_parse_dist(obj["thought_tokens"], _join(path, "thought_tokens")) if "thought_tokens" in obj else TreeSpec.__dataclass_fields__["thought_tokens"].default_factory(),
            output_tokens=_parse_dist(obj["output_tokens"], _join(path, "output_tokens")) if "output_tokens" in obj else TreeSpec.__dataclass_fields__["output_tokens"].default_factory(),
            start_spread_ms=_typed(obj, path, "start_spread_ms", int, 1000),
        )
        if spec.depth < 1:
            raise ScenarioError(_join(path, "depth"), "must be >= 1")
        return kind, spec, None
    if kind == "diurnal":
        allowed = {
            "kind", "regions", "duration_hours", "period_hours", "ms_per_hour",
            "prompt_tokens", "output_tokens",
        }
        _expect(obj, path, allowed, {"kind", "regions"})
        raw_regions = obj["regions"]
        if not isinstance(raw_regions, dict) or not raw_regions:
            raise ScenarioError(_join(path, "regions"), "expected a non-empty object")
        region_specs: dict[str, DiurnalRegion] = {}
        for region, cfg in raw_regions.items():
            rpath = _join(path, f"regions.{region}")
            if region not in regions:
                raise ScenarioError(rpath, "unknown region")
            if not isinstance(cfg, dict):
                raise ScenarioError(rpath, "expected an object")
            _expect(cfg, rpath, {"base_rps", "amplitude", "phase_hours"}, {"base_rps"})
            try:
                region_specs[region] = DiurnalRegion(
                    base_rps=_typed(cfg, rpath, "base_rps", float),
                    amplitude=_typed(cfg, rpath, "amplitude", float, 0.0),
                    phase_hours=_typed(cfg, rpath, "phase_hours", float, 0.0),
                )
            except ValueError as exc:
                raise ScenarioError(rpath, str(exc)) from None
        spec = DiurnalSpec(
            regions=region_specs,
            duration_hours=_typed(obj, path, "duration_hours", float, 24.0),
            period_hours=_typed(obj, path, "period_hours", float, 24.0),
            ms_per_hour=_typed(obj, path, "ms_per_hour", int, 3_600_000),
            prompt_tokens=_parse_dist(obj["prompt_tokens"], _join(path, "prompt_tokens")) if "prompt_tokens" in obj else DiurnalSpec.__dataclass_fields__["prompt_tokens"].default_factory(),
            output_tokens=_parse_dist(obj["output_tokens"], _join(path, "output_tokens")) if "output_tokens" in obj else DiurnalSpec.__dataclass_fields__["output_tokens"].default_factory(),
        )
        return kind, spec, None
    if kind == "trace":
        _expect(obj, path, {"kind", "path"}, {"kind", "path"})
        return kind, None, _typed(obj, path, "path", str)
    raise ScenarioError(_join(path, "kind"), f"unknown workload kind {kind!r}")


_TOP_LEVEL = {
    "regions", "latency", "replicas", "replica", "balancer", "policy",
    "cross_region", "workload", "failures", "seed", "horizon_ms", "grid",
}
_LATENCY_FIELDS = {"intra_ms", "default_inter_ms", "pairs"}
_REPLICA_FIELDS = {"kv_budget_tokens", "prefill_ms_per_token", "decode_base_ms", "decode_ms_per_seq"}
_BALANCER_FIELDS = {
    "probe_interval_ms", "queue_buffer_tau", "trie_max_size",
    "snapshot_trie_max_size", "vnodes_per_target", "fallback_threshold",
}


def parse_scenario(raw: Mapping) -> Scenario:
    if not isinstance(raw, Mapping):
        raise ScenarioError("", "scenario must be a JSON object")
    _expect(raw, "", _TOP_LEVEL, {"regions", "replicas", "policy", "workload", "horizon_ms"})

    regions = raw["regions"]
    if (
        not isinstance(regions, list)
        or not regions
        or any(not isinstance(r, str) for r in regions)
        or len(set(regions)) != len(regions)
    ):
        raise ScenarioError("regions", "expected a non-empty list of unique region names")

    lat_cfg = raw.get("latency", {})
    if not isinstance(lat_cfg, dict):
        raise ScenarioError("latency", "expected an object")
    _expect(lat_cfg, "latency", _LATENCY_FIELDS, set())
    pairs: dict[tuple[str, str], int] = {}
    for key, ms in lat_cfg.get("pairs", {}).items():
        parts = key.split("|")
        if len(parts) != 2 or parts[0] not in regions or parts[1] not in regions:
            raise ScenarioError(f"latency.pairs.{key}", "expected '<region>|<region>'")
        if not isinstance(ms, int) or isinstance(ms, bool) or ms < 0:
            raise ScenarioError(f"latency.pairs.{key}", "expected a non-negative integer")
        pairs[(parts[0], parts[1])] = ms
    latency = LatencyMatrix.build(
        list(regions),
        intra_ms=_typed(lat_cfg, "latency", "intra_ms", int, DEFAULT_INTRA_MS),
        pairs=pairs,
        default_inter_ms=_typed(lat_cfg, "latency", "default_inter_ms", int, DEFAULT_INTER_MS),
    )

    replicas = _parse_clients(raw["replicas"], "replicas", list(regions))
    if sum(replicas.values()) < 1:
        raise ScenarioError("replicas", "scenario needs at least one replica")
    for region in regions:
        if replicas.get(region, 0) < 1:
            raise ScenarioError(_join("replicas", region), "every region needs at least one replica")

    rep_cfg = raw.get("replica", {})
    if not isinstance(rep_cfg, dict):
        raise ScenarioError("replica", "expected an object")
    _expect(rep_cfg, "replica", _REPLICA_FIELDS, set())
    try:
        replica_config = ReplicaConfig(
            kv_budget_tokens=_typed(rep_cfg, "replica", "kv_budget_tokens", int, ReplicaConfig.kv_budget_tokens),
            prefill_ms_per_token=_typed(rep_cfg, "replica", "prefill_ms_per_token", float, ReplicaConfig.prefill_ms_per_token),
            decode_base_ms=_typed(rep_cfg, "replica", "decode_base_ms", float, ReplicaConfig.decode_base_ms),
            decode_ms_per_seq=_typed(rep_cfg, "replica", "decode_ms_per_seq", float, ReplicaConfig.decode_ms_per_seq),
        )
    except ValueError as exc:
        raise ScenarioError("replica", str(exc)) from None

    bal_cfg = raw.get("balancer", {})
    if not isinstance(bal_cfg, dict):
        raise ScenarioError("balancer", "expected an object")
    _expect(bal_cfg, "balancer", _BALANCER_FIELDS, set())

    try:
        policy = parse_policy(_typed(raw, "", "policy", str))
    except ValueError as exc:
        raise ScenarioError("policy", str(exc)) from None
    threshold = _typed(bal_cfg, "balancer", "fallback_threshold", float, policy.fallback_threshold)
    policy = PolicyKind(
        selector=policy.selector,
        pushing=policy.pushing,
        sp_o_limit=policy.sp_o_limit,
        fallback_threshold=threshold,
    )

    kind, workload, trace_path = _parse_workload(raw["workload"], list(regions))

    failures: list[FailureSpec] = []
    for i, f in enumerate(raw.get("failures", [])):
        fpath = f"failures[{i}]"
        if not isinstance(f, dict):
            raise ScenarioError(fpath, "expected an object")
        _expect(f, fpath, {"region", "at_ms", "recover_at_ms"}, {"region", "at_ms", "recover_at_ms"})
        region = _typed(f, fpath, "region", str)
        if region not in regions:
            raise ScenarioError(_join(fpath, "region"), "unknown region")
        at_ms = _typed(f, fpath, "at_ms", int)
        recover = _typed(f, fpath, "recover_at_ms", int)
        if at_ms < 0 or recover <= at_ms:
            raise ScenarioError(fpath, "needs 0 <= at_ms < recover_at_ms")
        failures.append(FailureSpec(region=region, at_ms=at_ms, recover_at_ms=recover))
    _check_failures_leave_a_survivor(failures, list(regions))

    horizon = _typed(raw, "", "horizon_ms", int)
    if horizon < 1:
        raise ScenarioError("horizon_ms", "must be >= 1")

    grid_cfg = raw.get("grid", {})
    if not isinstance(grid_cfg, dict):
        raise ScenarioError("grid", "expected an object")
    grid: dict[str, list] = {}
    for key, values in grid_cfg.items():
        if not isinstance(values, list) or not values:
            raise ScenarioError(_join("grid", key), "expected a non-empty list")
        grid[key] = values

    scenario = Scenario(
        regions=list(regions),
        latency=latency,
        replicas_per_region=replicas,
        replica_config=replica_config,
        policy=policy,
        cross_region=_typed(raw, "", "cross_region", bool, True),
        probe_interval_ms=_typed(bal_cfg, "balancer", "probe_interval_ms", int, DEFAULT_PROBE_INTERVAL_MS),
        queue_buffer_tau=_typed(bal_cfg, "balancer", "queue_buffer_tau", int, DEFAULT_QUEUE_BUFFER_TAU),
        trie_max_size=_typed(bal_cfg, "balancer", "trie_max_size", int, 100_000),
        snapshot_trie_max_size=_typed(bal_cfg, "balancer", "snapshot_trie_max_size", int, None),
        vnodes_per_target=_typed(bal_cfg, "balancer", "vnodes_per_target", int, 100),
        workload_kind=kind,
        workload=workload,
        trace_path=trace_path,
        failures=failures,
        seed=_typed(raw, "", "seed", int, 0),
        horizon_ms=horizon,
        grid=grid,
        raw=dict(copy.deepcopy(raw)),
    )
    if scenario.probe_interval_ms < 1:
        raise ScenarioError("balancer.probe_interval_ms", "must be >= 1")
    if scenario.queue_buffer_tau < 0:
        raise ScenarioError("balancer.queue_buffer_tau", "must be non-negative")
    # Grid keys must resolve against the schema (checked by applying them).
    for key, values in grid.items():
        probe = copy.deepcopy(scenario.raw)
        probe.pop("grid", None)
        apply_override(probe, key, values[0])
        parse_scenario(probe)
    return scenario


def _check_failures_leave_a_survivor(failures: list[FailureSpec], regions: list[str]) -> None:
    boundaries = sorted({f.at_ms for f in failures})
    for t in boundaries:
        down = {f.region for f in failures if f.at_ms <= t < f.recover_at_ms}
        if len(down) >= len(regions):
            raise ScenarioError("failures", f"every balancer is down at t={t}")


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ScenarioError("", f"{path}: invalid JSON: {exc.msg} (line {exc.lineno})") from None
    return parse_scenario(raw)


def apply_override(raw: dict, dotted: str, value: Any) -> None:
    """Set ``raw[a][b][...] = value`` for a dotted field path, in place."""
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ScenarioError(dotted, "path crosses a non-object field")
        node = nxt
    node[parts[-1]] = value


def scenario_variants(scenario: Scenario, grid: Mapping[str, list] | None = None) -> list[tuple[dict, Scenario]]:
    """Expand grid axes into (overrides, parsed scenario) cells, in
    deterministic order (axes sorted by name, values in listed order)."""
    axes = dict(grid) if grid is not None else scenario.grid
    if not axes:
        return [({}, scenario)]
    names = sorted(axes)
    cells: list[tuple[dict, Scenario]] = []

    def expand(i: int, chosen: dict) -> None:
        if i == len(names):
            raw = copy.deepcopy(scenario.raw)
            raw.pop("grid", None)
            for key, value in chosen.items():
                apply_override(raw, key, value)
            cells.append((dict(chosen), parse_scenario(raw)))
            return
        for value in axes[names[i]]:
            chosen[names[i]] = value
            expand(i + 1, chosen)
            del chosen[names[i]]

    expand(0, {})
    return cells


def horizon_events_guard(scenario: Scenario) -> None:
    """Sanity ceiling so a mis-sized scenario fails fast instead of hanging."""
    ticks = scenario.horizon_ms / scenario.probe_interval_ms
    n_targets = sum(scenario.replicas_per_region.values()) + len(scenario.regions)
    if ticks * n_targets > 5e7:
        raise ScenarioError("horizon_ms", "scenario implies too many probe events")
