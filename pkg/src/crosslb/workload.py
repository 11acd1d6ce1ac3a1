"""Workload generators: multi-turn conversations, request trees, diurnal
arrival schedules, and JSONL trace ingestion.

Conversation and tree workloads are closed-loop: a client never has more
than one program in flight, and a follow-up request is issued only once its
predecessor completes. Programs are fully scripted at construction time
(lengths, ids, token content), so content is a pure function of (spec,
seed) regardless of how the simulation interleaves completions. Generated
output content comes from :func:`crosslb.core.synthetic_output_tokens`, the
same function the replica cache uses.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .core import Request, TokenSeq, synthetic_output_tokens
from .hashing import hash64, token_stream

# Disjoint token-id namespaces so distinct structure never collides.
_USER_TAG_BASE = 30_000_000
_LANE_TAG_BASE = 31_000_000
_BRANCH_TAG_BASE = 40_000_000


@dataclass(frozen=True)
class LengthDist:
    """Integer length distribution: fixed, uniform, or clamped lognormal."""

    kind: str
    value: int = 0
    low: int = 1
    high: int = 1
    mu: float = 0.0
    sigma: float = 1.0
    min_value: int = 1
    max_value: int = 1 << 20

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform", "lognormal"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "uniform" and self.low > self.high:
            raise ValueError("uniform distribution needs low <= high")
        if self.min_value > self.max_value:
            raise ValueError("distribution needs min <= max")

    def sample(self, rng: random.Random) -> int:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return rng.randint(self.low, self.high)
        raw = rng.lognormvariate(self.mu, self.sigma)
        return max(self.min_value, min(self.max_value, round(raw)))

    @staticmethod
    def fixed(value: int) -> "LengthDist":
        return LengthDist(kind="fixed", value=value)

    @staticmethod
    def uniform(low: int, high: int) -> "LengthDist":
        return LengthDist(kind="uniform", low=low, high=high)

    @staticmethod
    def lognormal(mu: float, sigma: float, min_value: int = 1, max_value: int = 1 << 20) -> "LengthDist":
        return LengthDist(
            kind="lognormal", mu=mu, sigma=sigma, min_value=min_value, max_value=max_value
        )


# Heavy-tailed length defaults: medians in the low hundreds of tokens with a
# long tail to a few thousand. Calibration knobs, not measured values; at the
# default replica budget they make a full batch range from ~20 to ~50+.
DEFAULT_PROMPT_TOKENS = LengthDist.lognormal(4.9, 1.15, min_value=16, max_value=4096)
DEFAULT_OUTPUT_TOKENS = LengthDist.lognormal(4.8, 1.25, min_value=4, max_value=4096)


@dataclass(frozen=True)
class ConversationSpec:
    clients_per_region: Mapping[str, int]
    turns: LengthDist = field(default_factory=lambda: LengthDist.uniform(3, 6))
    new_tokens: LengthDist = field(default_factory=lambda: LengthDist.lognormal(4.0, 0.6, min_value=8, max_value=512))
    output_tokens: LengthDist = field(default_factory=lambda: LengthDist.lognormal(4.6, 0.8, min_value=4, max_value=1024))
    shared_prefix_len: int = 16
    burst_k: int = 1
    conversations_per_client: int = 1
    start_spread_ms: int = 1000


@dataclass(frozen=True)
class TreeSpec:
    clients_per_region: Mapping[str, int]
    branching: int | Mapping[str, int] = 2
    depth: int = 4
    trees_per_client: int = 1
    question_tokens: LengthDist = field(default_factory=lambda: LengthDist.uniform(48, 96))
    thought_tokens: LengthDist = field(default_factory=lambda: LengthDist.uniform(8, 24))
    output_tokens: LengthDist = field(default_factory=lambda: LengthDist.lognormal(4.4, 0.6, min_value=8, max_value=512))
    start_spread_ms: int = 1000

    def branching_for(self, region: str) -> int:
        if isinstance(self.branching, int):
            b = self.branching
        else:
            b = self.branching[region]
        if b < 1:
            raise ValueError("branching must be >= 1")
        return b

    def requests_per_tree(self, region: str) -> int:
        b = self.branching_for(region)
        if b == 1:
            return self.depth
        return (b**self.depth - 1) // (b - 1)


@dataclass(frozen=True)
class DiurnalRegion:
    base_rps: float
    amplitude: float
    phase_hours: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError("amplitude must lie in [0, 1]")
        if self.base_rps < 0:
            raise ValueError("base_rps must be non-negative")


@dataclass(frozen=True)
class DiurnalSpec:
    regions: Mapping[str, DiurnalRegion]
    duration_hours: float = 24.0
    period_hours: float = 24.0
    ms_per_hour: int = 3_600_000
    prompt_tokens: LengthDist = field(default_factory=lambda: DEFAULT_PROMPT_TOKENS)
    output_tokens: LengthDist = field(default_factory=lambda: DEFAULT_OUTPUT_TOKENS)

    def rate(self, region: str, t_hours: float) -> float:
        r = self.regions[region]
        theta = 2.0 * math.pi * (t_hours - r.phase_hours) / self.period_hours
        return r.base_rps * (1.0 + r.amplitude * math.sin(theta))


# ---------------------------------------------------------------------------
# Closed-loop client programs.


@dataclass
class _ScriptedRequest:
    id: str
    session_key: str
    prompt: TokenSeq
    output_len: int
    next_ids: list[str] = field(default_factory=list)


class ClientProgram:
    """One closed-loop client; the engine feeds completions back in."""

    def __init__(self, client_id: str, region: str, start_at: int) -> None:
        self.client_id = client_id
        self.region = region
        self.start_at = start_at
        self._scripts: dict[str, _ScriptedRequest] = {}
        self._roots: list[str] = []
        self._open = 0
        self._issued_roots = 0

    def _register(self, script: _ScriptedRequest) -> None:
        self._scripts[script.id] = script

    def _make(self, script_id: str, now: int) -> Request:
        s = self._scripts[script_id]
        self._open += 1
        return Request(
            id=s.id,
            session_key=s.session_key,
            origin_region=self.region,
            prompt=s.prompt,
            output_len=s.output_len,
            arrival_time=now,
        )

    def start(self, now: int) -> list[Request]:
        if not self._roots:
            return []
        self._issued_roots = 1
        return [self._make(rid, now) for rid in self._initial_batch(self._roots[0])]

    def on_complete(self, request_id: str, now: int) -> list[Request]:
        script = self._scripts.get(request_id)
        if script is None:
            return []
        self._open -= 1
        issued = [self._make(rid, now) for rid in script.next_ids]
        if not issued and self._open == 0 and self._issued_roots < len(self._roots):
            root = self._roots[self._issued_roots]
            self._issued_roots += 1
            issued = [self._make(rid, now) for rid in self._initial_batch(root)]
        return issued

    def _initial_batch(self, root_id: str) -> list[str]:
        return [root_id]

    @property
    def done(self) -> bool:
        return self._open == 0 and self._issued_roots >= len(self._roots)


class ConversationProgram(ClientProgram):
    """Multi-turn chat client.

    Each turn's prompt is the full prior history (previous prompt plus the
    previous assistant output) extended with fresh user tokens, so turn t is
    always a strict prefix-extension of turn t-1. With ``burst_k > 1`` the
    client runs that many independent conversations concurrently under one
    session key, which is the bursty/heterogeneous-program stressor.
    """

    def __init__(
        self,
        client_id: str,
        region: str,
        start_at: int,
        spec: ConversationSpec,
        seed: int,
        client_index: int,
    ) -> None:
        super().__init__(client_id, region, start_at)
        rng = random.Random(hash64(f"conv:{seed}:{client_id}"))
        shared = token_stream(f"sys:{seed}", spec.shared_prefix_len) if spec.shared_prefix_len else ()
        user_tag = (_USER_TAG_BASE + client_index,)
        lane_first_ids: list[str] = []
        for lane in range(spec.burst_k):
            lane_tag = (_LANE_TAG_BASE + lane,)
            prev: _ScriptedRequest | None = None
            lane_first: str | None = None
            for conv in range(spec.conversations_per_client):
                n_turns = max(1, spec.turns.sample(rng))
                history: TokenSeq = shared + user_tag + lane_tag + (
                    token_stream(f"{client_id}:{lane}:{conv}:open", 4)
                )
                for turn in range(n_turns):
                    rid = f"{client_id}-l{lane}-c{conv}-t{turn}"
                    new_tokens = token_stream(f"{rid}:u", max(1, spec.new_tokens.sample(rng)))
                    prompt = history + new_tokens
                    out_len = max(1, spec.output_tokens.sample(rng))
                    script = _ScriptedRequest(
                        id=rid, session_key=client_id, prompt=prompt, output_len=out_len
                    )
                    self._register(script)
                    if prev is None:
                        lane_first = lane_first or rid
                    else:
                        prev.next_ids.append(rid)
                    prev = script
                    history = prompt + synthetic_output_tokens(rid, out_len)
            if lane_first is not None:
                lane_first_ids.append(lane_first)
        # All lanes belong to one program; issue them together at start.
        self._lane_first_ids = lane_first_ids
        self._roots = ["__lanes__"] if lane_first_ids else []

    def _initial_batch(self, root_id: str) -> list[str]:
        return self._lane_first_ids


class TreeProgram(ClientProgram):
    """Tree-structured reasoning client (one tree in flight at a time).

    Every node is one request; a node's children become issuable when it
    completes, and siblings run concurrently. A child's prompt extends its
    parent's prompt with the parent's output, a branch marker, and fresh
    thought tokens, so nodes share prefixes up to their lowest common
    ancestor.
    """

    def __init__(
        self,
        client_id: str,
        region: str,
        start_at: int,
        spec: TreeSpec,
        seed: int,
    ) -> None:
        super().__init__(client_id, region, start_at)
        rng = random.Random(hash64(f"tree:{seed}:{client_id}"))
        b = spec.branching_for(region)
        for ti in range(spec.trees_per_client):
            session = f"{client_id}:t{ti}"
            q_len = max(1, spec.question_tokens.sample(rng))
            root_prompt = token_stream(f"{client_id}:q{ti}", q_len)
            root_id = f"{client_id}-t{ti}-n0"
            counter = 1
            root = _ScriptedRequest(
                id=root_id,
                session_key=session,
                prompt=root_prompt,
                output_len=max(1, spec.output_tokens.sample(rng)),
            )
            self._register(root)
            self._roots.append(root_id)
            frontier = [root]
            for _level in range(1, spec.depth):
                next_frontier: list[_ScriptedRequest] = []
                for parent in frontier:
                    parent_out = synthetic_output_tokens(parent.id, parent.output_len)
                    for j in range(b):
                        rid = f"{client_id}-t{ti}-n{counter}"
                        counter += 1
                        thought = token_stream(f"{rid}:th", max(1, spec.thought_tokens.sample(rng)))
                        prompt = (
                            parent.prompt
                            + parent_out
                            + (_BRANCH_TAG_BASE + j,)
                            + thought
                        )
                        child = _ScriptedRequest(
                            id=rid,
                            session_key=session,
                            prompt=prompt,
                            output_len=max(1, spec.output_tokens.sample(rng)),
                        )
                        self._register(child)
                        parent.next_ids.append(rid)
                        next_frontier.append(child)
                frontier = next_frontier


def _client_starts(n: int, spread_ms: int) -> list[int]:
    if n <= 1 or spread_ms <= 0:
        return [0] * n
    return [i * spread_ms // n for i in range(n)]


def build_programs(
    spec: ConversationSpec | TreeSpec, seed: int
) -> list[ClientProgram]:
    """Instantiate closed-loop clients for a conversation or tree spec."""
    programs: list[ClientProgram] = []
    client_index = 0
    regions = sorted(spec.clients_per_region)
    totals = [(r, spec.clients_per_region[r]) for r in regions]
    for region, count in totals:
        starts = _client_starts(count, spec.start_spread_ms)
        for i in range(count):
            client_id = f"{region}-u{i}"
            if isinstance(spec, ConversationSpec):
                prog: ClientProgram = ConversationProgram(
                    client_id, region, starts[i], spec, seed, client_index
                )
            else:
                prog = TreeProgram(client_id, region, starts[i], spec, seed)
            programs.append(prog)
            client_index += 1
    return programs


# ---------------------------------------------------------------------------
# Trace materialization and open-loop schedules.


def _drain_program(prog: ClientProgram, step_ms: int = 1000) -> list[Request]:
    """Run a program against an instant-completion clock to get a flat trace."""
    out: list[Request] = []
    now = prog.start_at
    frontier = prog.start(now)
    while frontier:
        out.extend(frontier)
        now += step_ms
        nxt: list[Request] = []
        for req in frontier:
            nxt.extend(prog.on_complete(req.id, now))
        frontier = nxt
    return out


def gen_conversations(spec: ConversationSpec, seed: int) -> list[Request]:
    """Materialize the conversation workload as a flat, arrival-sorted trace.

    Arrival times are nominal (each turn one virtual step after its
    predecessor); closed-loop timing comes from running the programs inside
    the simulator instead.
    """
    out: list[Request] = []
    for prog in build_programs(spec, seed):
        out.extend(_drain_program(prog))
    out.sort(key=lambda r: r.arrival_time)
    return out


def gen_tot(spec: TreeSpec, seed: int) -> list[Request]:
    """Materialize the tree workload as a flat, arrival-sorted trace."""
    out: list[Request] = []
    for prog in build_programs(spec, seed):
        out.extend(_drain_program(prog))
    out.sort(key=lambda r: r.arrival_time)
    return out


def gen_diurnal(spec: DiurnalSpec, seed: int) -> list[Request]:
    """Open-loop Poisson arrivals with per-region sinusoidal rates.

    Generated by thinning against each region's peak rate; deterministic
    for a fixed (spec, seed).
    """
    if not spec.regions:
        raise ValueError("diurnal spec needs at least one region")
    out: list[Request] = []
    for region in sorted(spec.regions):
        cfg = spec.regions[region]
        rng = random.Random(hash64(f"diurnal:{seed}:{region}"))
        peak = cfg.base_rps * (1.0 + cfg.amplitude)
        if peak <= 0:
            continue
        horizon_s = spec.duration_hours * spec.ms_per_hour / 1000.0
        t_s = 0.0
        i = 0
        while True:
            t_s += rng.expovariate(peak)
            if t_s >= horizon_s:
                break
            t_hours = t_s * 1000.0 / spec.ms_per_hour
            if rng.random() * peak > spec.rate(region, t_hours):
                continue
            rid = f"d-{region}-{i}"
            i += 1
            plen = max(1, spec.prompt_tokens.sample(rng))
            out.append(
                Request(
                    id=rid,
                    session_key=rid,
                    origin_region=region,
                    prompt=token_stream(rid, plen),
                    output_len=max(1, spec.output_tokens.sample(rng)),
                    arrival_time=round(t_s * 1000.0),
                )
            )
    out.sort(key=lambda r: r.arrival_time)
    return out


def diurnal_rate_series(spec: DiurnalSpec, samples_per_hour: int = 1) -> dict[str, list[float]]:
    """Closed-form per-region rate series, for provisioning analysis."""
    n = round(spec.duration_hours * samples_per_hour)
    return {
        region: [spec.rate(region, t / samples_per_hour) for t in range(n)]
        for region in sorted(spec.regions)
    }


# ---------------------------------------------------------------------------
# JSONL trace records:
#   {"id":str,"session":str,"region":str,"arrival_ms":int,"prompt":[int,...],"output_len":int}

_TRACE_FIELDS = ("id", "session", "region", "arrival_ms", "prompt", "output_len")


class TraceError(ValueError):
    def __init__(self, path: str, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


def save_trace(requests: Sequence[Request], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in requests:
            record = {
                "id": r.id,
                "session": r.session_key,
                "region": r.origin_region,
                "arrival_ms": r.arrival_time,
                "prompt": list(r.prompt),
                "output_len": r.output_len,
            }
            f.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_trace(path: str) -> list[Request]:
    """Parse and validate a JSONL trace; result is arrival-sorted (stable)."""
    out: list[Request] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(path, lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(record, dict):
                raise TraceError(path, lineno, "record must be a JSON object")
            missing = [k for k in _TRACE_FIELDS if k not in record]
            extra = [k for k in record if k not in _TRACE_FIELDS]
            if missing:
                raise TraceError(path, lineno, f"missing fields: {missing}")
            if extra:
                raise TraceError(path, lineno, f"unknown fields: {extra}")
            if not isinstance(record["id"], str) or not isinstance(record["session"], str):
                raise TraceError(path, lineno, "id and session must be strings")
            if not isinstance(record["region"], str):
                raise TraceError(path, lineno, "region must be a string")
            if not isinstance(record["arrival_ms"], int) or record["arrival_ms"] < 0:
                raise TraceError(path, lineno, "arrival_ms must be a non-negative integer")
            prompt = record["prompt"]
            if (
                not isinstance(prompt, list)
                or not prompt
                or not all(isinstance(t, int) and t >= 0 for t in prompt)
            ):
                raise TraceError(path, lineno, "prompt must be a non-empty list of token ids")
            if not isinstance(record["output_len"], int) or record["output_len"] < 1:
                raise TraceError(path, lineno, "output_len must be a positive integer")
            out.append(
                Request(
                    id=record["id"],
                    session_key=record["session"],
                    origin_region=record["region"],
                    prompt=tuple(prompt),
                    output_len=record["output_len"],
                    arrival_time=record["arrival_ms"],
                )
            )
    out.sort(key=lambda r: r.arrival_time)  # stable: ties keep line order
    return out
