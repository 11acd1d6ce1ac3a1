"""Metric aggregation over event logs, plus the provisioning-cost analyzer.

Percentiles use the nearest-rank method (no interpolation). Requests still
in flight when a run is cut off are excluded from latency statistics and
reported separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .core import RequestTimeline

# AWS p5.48xlarge: 3-year reserved vs on-demand hourly rate.
DEFAULT_RESERVED_RATE = 37.56
DEFAULT_ON_DEMAND_RATE = 98.32


def percentile_nearest_rank(values: Sequence[float], p: float) -> float:
    if not values:
        raise ValueError("cannot take a percentile of no samples")
    if not 0 < p <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    ordered = sorted(values)
    rank = math.ceil(p / 100.0 * len(ordered))
    return ordered[max(0, rank - 1)]


@dataclass
class LatencyStats:
    p50: float
    p90: float
    mean: float

    @staticmethod
    def of(values: Sequence[float]) -> "LatencyStats":
        return LatencyStats(
            p50=percentile_nearest_rank(values, 50),
            p90=percentile_nearest_rank(values, 90),
            mean=sum(values) / len(values),
        )

    @staticmethod
    def empty() -> "LatencyStats":
        return LatencyStats(p50=float("nan"), p90=float("nan"), mean=float("nan"))


@dataclass
class RunSummary:
    completed: int
    duration_ms: int
    throughput_rps: float
    throughput_tokens_per_s: float
    ttft: LatencyStats
    e2e: LatencyStats
    kv_hit_rate: float
    outstanding_variance: float
    forward_fraction: float
    in_flight_at_end: int

    def to_dict(self) -> dict:
        return {
            "completed": self.completed,
            "duration_ms": self.duration_ms,
            "throughput_rps": self.throughput_rps,
            "throughput_tokens_per_s": self.throughput_tokens_per_s,
            "ttft_ms": {"p50": self.ttft.p50, "p90": self.ttft.p90, "mean": self.ttft.mean},
            "e2e_ms": {"p50": self.e2e.p50, "p90": self.e2e.p90, "mean": self.e2e.mean},
            "kv_hit_rate": self.kv_hit_rate,
            "outstanding_variance": self.outstanding_variance,
            "forward_fraction": self.forward_fraction,
            "in_flight_at_end": self.in_flight_at_end,
        }

    CSV_FIELDS = (
        "completed",
        "duration_ms",
        "throughput_rps",
        "throughput_tokens_per_s",
        "ttft_p50_ms",
        "ttft_p90_ms",
        "ttft_mean_ms",
        "e2e_p50_ms",
        "e2e_p90_ms",
        "e2e_mean_ms",
        "kv_hit_rate",
        "outstanding_variance",
        "forward_fraction",
        "in_flight_at_end",
    )

    def csv_row(self) -> list:
        return [
            self.completed,
            self.duration_ms,
            round(self.throughput_rps, 6),
            round(self.throughput_tokens_per_s, 6),
            self.ttft.p50,
            self.ttft.p90,
            round(self.ttft.mean, 6),
            self.e2e.p50,
            self.e2e.p90,
            round(self.e2e.mean, 6),
            round(self.kv_hit_rate, 6),
            round(self.outstanding_variance, 6),
            round(self.forward_fraction, 6),
            self.in_flight_at_end,
        ]


class MalformedLog(ValueError):
    def __init__(self, record: object, message: str) -> None:
        super().__init__(f"{message}: {record!r}")
        self.record = record


def build_timelines(event_log: Sequence[Mapping]) -> dict[str, RequestTimeline]:
    """Reconstruct per-request timelines from an event log."""
    timelines: dict[str, RequestTimeline] = {}
    for record in event_log:
        if "event" not in record or "ts" not in record:
            raise MalformedLog(record, "record missing ts/event")
        event = record["event"]
        if event in ("lb_down", "lb_up", "reassign", "probe"):
            continue
        rid = record.get("request_id")
        if rid is None:
            raise MalformedLog(record, "request event missing request_id")
        ts = record["ts"]
        if event == "arrive":
            if rid not in timelines:
                timelines[rid] = RequestTimeline(
                    request_id=rid,
                    arrival_time=ts,
                    prompt_len=record["prompt_len"],
                    output_len=record["output_len"],
                )
            continue
        tl = timelines.get(rid)
        if tl is None:
            raise MalformedLog(record, "event for unknown request")
        if event == "route_local":
            tl.lb_dequeue_time = ts
            tl.served_by = record["replica"]
        elif event == "forward":
            tl.forwarded_via = record["peer"]
        elif event == "admit":
            tl.replica_admit_time = ts
            tl.cached_prefix_len = record["cached_len"]
        elif event == "client_first_token":
            tl.first_token_time = ts
        elif event == "client_complete":
            tl.completion_time = ts
        elif event in ("enqueue", "pend", "first_token", "complete"):
            pass
        else:
            raise MalformedLog(record, f"unknown event {event!r}")
    for tl in timelines.values():
        tl.check_monotone()
    return timelines


def _replica_outstanding_maxima(event_log: Sequence[Mapping]) -> dict[str, int]:
    """Time-max of (running + pending) per replica, replayed from the log."""
    current: dict[str, int] = {}
    peak: dict[str, int] = {}
    arrived: set[tuple[str, str]] = set()
    for record in event_log:
        event = record.get("event")
        if event == "route_local":
            # Dispatch decision; the request is bound for this replica.
            continue
        if event in ("admit", "pend", "complete"):
            replica = record["replica"]
            rid = record["request_id"]
            peak.setdefault(replica, 0)
            if event == "complete":
                current[replica] = current.get(replica, 0) - 1
                continue
            key = (replica, rid)
            if key in arrived:
                continue  # pend followed by admit: one request, counted once
            arrived.add(key)
            current[replica] = current.get(replica, 0) + 1
            if current[replica] > peak[replica]:
                peak[replica] = current[replica]
    return peak


def summarize(event_log: Sequence[Mapping], duration_ms: int | None = None) -> RunSummary:
    timelines = build_timelines(event_log)
    if duration_ms is None:
        duration_ms = max((r["ts"] for r in event_log), default=0)
    completed = [t for t in timelines.values() if t.completion_time is not None]
    in_flight = len(timelines) - len(completed)

    ttfts = [float(t.ttft) for t in completed if t.ttft is not None]
    e2es = [float(t.e2e) for t in completed]
    duration_s = duration_ms / 1000.0 if duration_ms > 0 else float("inf")
    out_tokens = sum(t.output_len for t in completed)

    admitted = [t for t in timelines.values() if t.replica_admit_time is not None]
    prompt_total = sum(t.prompt_len for t in admitted)
    cached_total = sum(t.cached_prefix_len for t in admitted)

    peaks = _replica_outstanding_maxima(event_log)
    if peaks:
        variance = max(peaks.values()) / max(1, min(peaks.values()))
    else:
        variance = 1.0

    forwarded = sum(1 for t in timelines.values() if t.forwarded_via is not None)

    return RunSummary(
        completed=len(completed),
        duration_ms=duration_ms,
        throughput_rps=len(completed) / duration_s,
        throughput_tokens_per_s=out_tokens / duration_s,
        ttft=LatencyStats.of(ttfts) if ttfts else LatencyStats.empty(),
        e2e=LatencyStats.of(e2es) if e2es else LatencyStats.empty(),
        kv_hit_rate=cached_total / prompt_total if prompt_total else 0.0,
        outstanding_variance=variance,
        forward_fraction=forwarded / len(timelines) if timelines else 0.0,
        in_flight_at_end=in_flight,
    )


# ---------------------------------------------------------------------------
# Provisioning cost.


@dataclass(frozen=True)
class CostModel:
    reserved_rate: float = DEFAULT_RESERVED_RATE
    on_demand_rate: float = DEFAULT_ON_DEMAND_RATE
    replica_capacity: float = 1.0  # requests/s one replica sustains

    def __post_init__(self) -> None:
        if self.on_demand_rate <= self.reserved_rate:
            raise ValueError("on_demand_rate must exceed reserved_rate")
        if self.replica_capacity <= 0:
            raise ValueError("replica_capacity must be positive")


PER_REGION_PEAK = "per_region_peak"
GLOBAL_PEAK = "global_peak"
PERFECT_ON_DEMAND = "perfect_on_demand"
STRATEGIES = (PER_REGION_PEAK, GLOBAL_PEAK, PERFECT_ON_DEMAND)


@dataclass
class ProvisioningResult:
    strategy: str
    cost: float
    replica_hours: float
    # Reserved strategies: the static replica count(s). On-demand: the peak.
    replicas: dict[str, int] = field(default_factory=dict)
    peak_replicas: int = 0


def provisioning_cost(
    demand: Mapping[str, Sequence[float]],
    strategy: str,
    model: CostModel,
    interval_hours: float = 1.0,
) -> ProvisioningResult:
    """Cost of serving a per-region rate series under one provisioning strategy.

    ``per_region_peak`` reserves each region for its own peak;
    ``global_peak`` reserves one shared pool for the peak of the summed
    series; ``perfect_on_demand`` pays the on-demand rate for exactly
    ceil(total demand / capacity) replicas at every sample, assuming
    instant, always-available scaling.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if not demand:
        raise ValueError("demand series is empty")
    lengths = {len(series) for series in demand.values()}
    if lengths == {0}:
        raise ValueError("demand series is empty")
    if len(lengths) != 1:
        raise ValueError("demand series must share one length")
    for region, series in demand.items():
        if any(x < 0 for x in series):
            raise ValueError(f"negative demand in region {region!r}")

    n = lengths.pop()
    hours = n * interval_hours
    cap = model.replica_capacity
    totals = [sum(demand[r][i] for r in demand) for i in range(n)]

    if strategy == PER_REGION_PEAK:
        counts = {r: math.ceil(max(series) / cap) for r, series in demand.items()}
        total = sum(counts.values())
        return ProvisioningResult(
            strategy=strategy,
            cost=total * model.reserved_rate * hours,
            replica_hours=total * hours,
            replicas=counts,
            peak_replicas=total,
        )
    if strategy == GLOBAL_PEAK:
        count = math.ceil(max(totals) / cap)
        return ProvisioningResult(
            strategy=strategy,
            cost=count * model.reserved_rate * hours,
            replica_hours=count * hours,
            replicas={"global": count},
            peak_replicas=count,
        )
    counts_t = [math.ceil(t / cap) for t in totals]
    replica_hours = sum(counts_t) * interval_hours
    return ProvisioningResult(
        strategy=strategy,
        cost=replica_hours * model.on_demand_rate,
        replica_hours=replica_hours,
        peak_replicas=max(counts_t),
    )
