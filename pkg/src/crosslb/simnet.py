"""Deterministic discrete-event engine wiring clients, balancers, and
replicas together across regions.

Everything runs off one min-heap of (time, insertion seq, action); events
at equal times fire in insertion order, so a run is a pure function of
(scenario, seed). Messages between regions are delivered after the one-way
delay from the latency matrix. A message sent to a balancer that is down
bounces back to its sender after the return delay and is re-sent to
whatever balancer currently fronts the origin region.

The controller is an omniscient, zero-latency observer outside the data
path: it notices a balancer failure two probe intervals after it happens,
hands the orphaned replicas to the live balancer closest to each replica's
region, redirects the failed region's clients, and undoes all of it on
recovery.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from functools import partial
from typing import Callable

from .balancer import Balancer, BalancerConfig, PeerProbe, ReplicaProbe, RoutingDecision
from .metrics import RunSummary, summarize
from .replica import Replica, ReplicaConfig, ReplicaEvent
from .scenario import Scenario, horizon_events_guard
from .workload import ClientProgram, build_programs, gen_diurnal, load_trace
from .core import Request


class EventQueue:
    """Min-heap of (time, tie_seq, action); ties fire in insertion order."""

    def __init__(self) -> None:
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0

    def push(self, time: int, action: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, self._seq, action))

    def pop(self) -> tuple[int, Callable[[], None]]:
        time, _, action = heapq.heappop(self._heap)
        return time, action

    def __bool__(self) -> bool:
        return bool(self._heap)

    def next_time(self) -> int:
        return self._heap[0][0]


@dataclass
class RunResult:
    event_log: list[dict]
    summary: RunSummary
    duration_ms: int
    horizon_reached: bool
    in_flight_at_end: int

    @property
    def timelines_complete(self) -> bool:
        return self.in_flight_at_end == 0


def lb_id_for(region: str) -> str:
    return f"lb-{region}"


def replica_ids_for(region: str, count: int) -> list[str]:
    return [f"r-{region}-{i}" for i in range(count)]


class Engine:
    """One simulation run. Build from a validated scenario, then `run()`."""

    def __init__(self, scenario: Scenario) -> None:
        horizon_events_guard(scenario)
        self.scenario = scenario
        self.now = 0
        self.events = EventQueue()
        self.log: list[dict] = []
        self.latency = scenario.latency

        self.replicas: dict[str, Replica] = {}
        self.replica_region: dict[str, str] = {}
        for region in sorted(scenario.regions):
            cfg = ReplicaConfig(
                kv_budget_tokens=scenario.replica_config.kv_budget_tokens,
                prefill_ms_per_token=scenario.replica_config.prefill_ms_per_token,
                decode_base_ms=scenario.replica_config.decode_base_ms,
                decode_ms_per_seq=scenario.replica_config.decode_ms_per_seq,
                region=region,
            )
            for rid in replica_ids_for(region, scenario.replicas_per_region[region]):
                self.replicas[rid] = Replica(rid, cfg)
                self.replica_region[rid] = region

        self.balancers: dict[str, Balancer] = {}
        self.lb_region: dict[str, str] = {}
        for region in sorted(scenario.regions):
            lb_id = lb_id_for(region)
            peers = {
                lb_id_for(other): other
                for other in sorted(scenario.regions)
                if other != region
            }
            local = replica_ids_for(region, scenario.replicas_per_region[region])
            interval = scenario.probe_interval_ms
            stale = {
                rid: 2 * interval + 2 * self.latency.latency(region, region) for rid in local
            }
            for peer, peer_region in peers.items():
                stale[peer] = 2 * interval + 2 * self.latency.latency(region, peer_region)
            config = BalancerConfig(
                lb_id=lb_id,
                region=region,
                policy=scenario.policy,
                probe_interval_ms=interval,
                queue_buffer_tau=scenario.queue_buffer_tau,
                trie_max_size=scenario.trie_max_size,
                snapshot_trie_max_size=scenario.snapshot_trie_max_size,
                vnodes_per_target=scenario.vnodes_per_target,
                seed=scenario.seed,
                cross_region=scenario.cross_region,
            )
            self.balancers[lb_id] = Balancer(config, local, peers, stale_after_ms=stale)
            self.lb_region[lb_id] = region

        # Replica ownership: home is fixed; owner changes under failures.
        self.home: dict[str, str] = {
            rid: lb_id_for(region) for rid, region in self.replica_region.items()
        }
        self.owner: dict[str, str] = dict(self.home)
        self.region_lb_map: dict[str, str] = {r: lb_id_for(r) for r in scenario.regions}

        self.requests: dict[str, Request] = {}
        self.dispatcher: dict[str, str] = {}
        self.program_of: dict[str, ClientProgram] = {}
        self.notice_buffer: dict[str, list[str]] = {}
        self._scheduled_wakes: dict[str, set[int]] = {rid: set() for rid in self.replicas}

        self.unfinished = 0
        self.total_issued = 0
        self._undone_programs = 0
        self._open_loop_remaining = 0
        self.programs: list[ClientProgram] = []

        self._build_workload()
        for lb_id in sorted(self.balancers):
            self._at(0, partial(self._monitor, lb_id))
        for f in scenario.failures:
            self.inject_failure(lb_id_for(f.region), f.at_ms, f.recover_at_ms)

    # -- setup ------------------------------------------------------------

    def _build_workload(self) -> None:
        s = self.scenario
        if s.workload_kind in ("conversations", "tot"):
            self.programs = build_programs(s.workload, s.seed)  # type: ignore[arg-type]
            self._undone_programs = sum(1 for p in self.programs if not p.done)
            for prog in self.programs:
                self._at(prog.start_at, partial(self._start_program, prog))
            return
        if s.workload_kind == "diurnal":
            schedule = gen_diurnal(s.workload, s.seed)  # type: ignore[arg-type]
        else:
            schedule = load_trace(s.trace_path)  # type: ignore[arg-type]
        self._open_loop_remaining = len(schedule)
        for req in schedule:
            self._at(req.arrival_time, partial(self._issue_open_loop, req))

    def inject_failure(self, lb_id: str, at_ms: int, recover_at_ms: int) -> None:
        if lb_id not in self.balancers:
            raise ValueError(f"unknown balancer {lb_id!r}")
        if recover_at_ms <= at_ms:
            raise ValueError("recover_at_ms must be after at_ms")
        detection = at_ms + 2 * self.scenario.probe_interval_ms
        self._at(at_ms, partial(self._fail_lb, lb_id))
        self._at(detection, partial(self._detect_failure, lb_id))
        self._at(recover_at_ms, partial(self._recover_lb, lb_id))

    # -- primitives ---------------------------------------------------------

    def _at(self, time: int, action: Callable[[], None]) -> None:
        self.events.push(time, action)

    def _lat(self, region_a: str, region_b: str) -> int:
        return self.latency.latency(region_a, region_b)

    def _log(self, **record) -> None:
        record["ts"] = self.now
        self.log.append(record)

    # -- client side --------------------------------------------------------

    def _start_program(self, prog: ClientProgram) -> None:
        self._issue_program_requests(prog, prog.start(self.now))

    def _issue_program_requests(self, prog: ClientProgram, requests: list[Request]) -> None:
        for req in requests:
            self.program_of[req.id] = prog
            self._issue(req)
        if prog.done:
            self._undone_programs -= 1

    def _issue_open_loop(self, req: Request) -> None:
        self._open_loop_remaining -= 1
        self._issue(req)

    def _issue(self, req: Request) -> None:
        self.requests[req.id] = req
        self.unfinished += 1
        self.total_issued += 1
        self._log(
            event="arrive",
            request_id=req.id,
            region=req.origin_region,
            session=req.session_key,
            prompt_len=len(req.prompt),
            output_len=req.output_len,
        )
        self._client_send(req.id)

    def _client_send(self, request_id: str) -> None:
        req = self.requests[request_id]
        lb_id = self.region_lb_map[req.origin_region]
        delay = self._lat(req.origin_region, self.lb_region[lb_id])
        self._at(
            self.now + delay,
            partial(self._deliver_client_request, lb_id, request_id),
        )

    def _deliver_client_request(self, lb_id: str, request_id: str) -> None:
        lb = self.balancers[lb_id]
        req = self.requests[request_id]
        if lb.down:
            back = self._lat(self.lb_region[lb_id], req.origin_region)
            self._at(self.now + back, partial(self._client_send, request_id))
            return
        self._accept_at_lb(lb, request_id, forwarded=False)

    # -- balancer side --------------------------------------------------------

    def _accept_at_lb(self, lb: Balancer, request_id: str, forwarded: bool) -> None:
        entry = lb.enqueue(self.requests[request_id].view(), self.now, forwarded=forwarded)
        self._pump(lb)
        if entry in lb.queue:
            self._log(event="enqueue", lb=lb.config.lb_id, request_id=request_id)

    def _pump(self, lb: Balancer) -> None:
        if lb.down:
            return
        while lb.queue:
            decision = lb.decide_head()
            if decision.kind == RoutingDecision.ENQUEUE:
                break
            entry = lb.pop_head()
            rid = entry.view.id
            if decision.kind == RoutingDecision.LOCAL:
                replica_id = decision.target
                self._log(
                    event="route_local", lb=lb.config.lb_id, request_id=rid, replica=replica_id
                )
                self.dispatcher[rid] = lb.config.lb_id
                delay = self._lat(lb.config.region, self.replica_region[replica_id])
                self._at(self.now + delay, partial(self._deliver_to_replica, replica_id, rid))
            else:
                peer_id = decision.target
                self._log(event="forward", lb=lb.config.lb_id, request_id=rid, peer=peer_id)
                delay = self._lat(lb.config.region, self.lb_region[peer_id])
                self._at(
                    self.now + delay,
                    partial(self._deliver_forward, peer_id, rid, lb.config.lb_id),
                )

    def _deliver_forward(self, lb_id: str, request_id: str, from_lb: str) -> None:
        lb = self.balancers[lb_id]
        if lb.down:
            back = self._lat(self.lb_region[lb_id], self.lb_region[from_lb])
            self._at(self.now + back, partial(self._bounce_forward, from_lb, request_id))
            return
        self._accept_at_lb(lb, request_id, forwarded=True)

    def _bounce_forward(self, from_lb: str, request_id: str) -> None:
        lb = self.balancers[from_lb]
        if lb.down:
            # Original balancer died meanwhile; fall back to the client path.
            self._client_send(request_id)
            return
        self._accept_at_lb(lb, request_id, forwarded=False)

    # -- replica side ----------------------------------------------------------

    def _deliver_to_replica(self, replica_id: str, request_id: str) -> None:
        replica = self.replicas[replica_id]
        events = replica.admit(self.requests[request_id], self.now)
        self._handle_replica_events(replica_id, events)
        self._schedule_wake(replica_id)

    def _schedule_wake(self, replica_id: str) -> None:
        wake = self.replicas[replica_id].wake_at
        if wake is None:
            return
        pending = self._scheduled_wakes[replica_id]
        if wake not in pending:
            pending.add(wake)
            self._at(wake, partial(self._replica_wake, replica_id, wake))

    def _replica_wake(self, replica_id: str, wake: int) -> None:
        self._scheduled_wakes[replica_id].discard(wake)
        events = self.replicas[replica_id].advance(self.now)
        self._handle_replica_events(replica_id, events)
        self._schedule_wake(replica_id)

    def _handle_replica_events(self, replica_id: str, events: list[ReplicaEvent]) -> None:
        region = self.replica_region[replica_id]
        for ev in events:
            rid = ev.request.id
            if ev.kind == "admit":
                self._log(
                    event="admit",
                    replica=replica_id,
                    request_id=rid,
                    cached_len=ev.cached_len,
                )
            elif ev.kind == "pend":
                self._log(event="pend", replica=replica_id, request_id=rid)
            elif ev.kind == "first_token":
                self._log(event="first_token", replica=replica_id, request_id=rid)
                origin = ev.request.origin_region
                self._at(
                    self.now + self._lat(region, origin),
                    partial(self._client_first_token, rid),
                )
            elif ev.kind == "complete":
                self._log(event="complete", replica=replica_id, request_id=rid)
                dispatcher = self.dispatcher[rid]
                self._at(
                    self.now + self._lat(region, self.lb_region[dispatcher]),
                    partial(self._deliver_completion_notice, dispatcher, replica_id),
                )
                origin = ev.request.origin_region
                self._at(
                    self.now + self._lat(region, origin),
                    partial(self._client_complete, rid),
                )

    def _client_first_token(self, request_id: str) -> None:
        self._log(event="client_first_token", request_id=request_id)

    def _client_complete(self, request_id: str) -> None:
        self._log(event="client_complete", request_id=request_id)
        self.unfinished -= 1
        prog = self.program_of.get(request_id)
        if prog is not None:
            was_done = prog.done
            followups = prog.on_complete(request_id, self.now)
            if followups:
                self._issue_program_requests(prog, followups)
            elif prog.done and not was_done:
                self._undone_programs -= 1

    def _deliver_completion_notice(self, lb_id: str, replica_id: str) -> None:
        lb = self.balancers[lb_id]
        if lb.down:
            self.notice_buffer.setdefault(lb_id, []).append(replica_id)
            return
        lb.note_completion(replica_id)

    # -- probing ------------------------------------------------------------

    def _monitor(self, lb_id: str) -> None:
        lb = self.balancers[lb_id]
        if lb.down:
            return  # the chain resumes on recovery
        if lb.recompute_availability(self.now):
            self._pump(lb)
        region = lb.config.region
        for rid in lb.replicas:
            delay = self._lat(region, self.replica_region[rid])
            self._at(self.now + delay, partial(self._probe_replica, lb_id, rid))
        for peer_id in lb.peers:
            delay = self._lat(region, self.lb_region[peer_id])
            self._at(self.now + delay, partial(self._probe_peer, lb_id, peer_id))
        self._at(self.now + lb.config.probe_interval_ms, partial(self._monitor, lb_id))

    def _probe_replica(self, lb_id: str, replica_id: str) -> None:
        pending, outstanding = self.replicas[replica_id].probe()
        delay = self._lat(self.replica_region[replica_id], self.lb_region[lb_id])
        self._at(
            self.now + delay,
            partial(self._probe_replica_return, lb_id, replica_id, pending, outstanding),
        )

    def _probe_replica_return(
        self, lb_id: str, replica_id: str, pending: int, outstanding: int
    ) -> None:
        lb = self.balancers[lb_id]
        if lb.down:
            return
        self._log(
            event="probe",
            lb=lb_id,
            target=replica_id,
            pending=pending,
            outstanding=outstanding,
        )
        lb.on_replica_probe(ReplicaProbe(replica_id, pending, outstanding), self.now)
        if lb.recompute_availability(self.now):
            self._pump(lb)

    def _probe_peer(self, lb_id: str, peer_id: str) -> None:
        peer = self.balancers[peer_id]
        if peer.down:
            return  # dropped; staleness marks the peer unavailable
        n_avail, qsize = peer.probe_response()
        delay = self._lat(self.lb_region[peer_id], self.lb_region[lb_id])
        self._at(
            self.now + delay,
            partial(self._probe_peer_return, lb_id, peer_id, n_avail, qsize),
        )

    def _probe_peer_return(self, lb_id: str, peer_id: str, n_avail: int, qsize: int) -> None:
        lb = self.balancers[lb_id]
        if lb.down:
            return
        self._log(
            event="probe", lb=lb_id, target=peer_id, n_avail=n_avail, queue_size=qsize
        )
        lb.on_peer_probe(PeerProbe(peer_id, n_avail, qsize), self.now)
        if lb.recompute_availability(self.now):
            self._pump(lb)

    # -- failures and the controller ------------------------------------------

    def _fail_lb(self, lb_id: str) -> None:
        self.balancers[lb_id].down = True
        self._log(event="lb_down", lb=lb_id)

    def _live_balancers(self) -> list[str]:
        return [b for b in sorted(self.balancers) if not self.balancers[b].down]

    def _detect_failure(self, lb_id: str) -> None:
        lb = self.balancers[lb_id]
        if not lb.down:
            return  # recovered before the controller noticed
        live = self._live_balancers()
        if not live:
            raise AssertionError("all balancers down; scenario validation should prevent this")
        # Redirect every region currently fronted by the failed balancer.
        for region in sorted(self.region_lb_map):
            if self.region_lb_map[region] == lb_id:
                self.region_lb_map[region] = min(
                    live, key=lambda b: (self._lat(region, self.lb_region[b]), b)
                )
        # Hand each orphaned replica to the closest live balancer.
        adopted: dict[str, list[str]] = {}
        for rid in sorted(self.owner):
            if self.owner[rid] != lb_id:
                continue
            adopter = min(
                live,
                key=lambda b: (self._lat(self.replica_region[rid], self.lb_region[b]), b),
            )
            adopted.setdefault(adopter, []).append(rid)
            self.owner[rid] = adopter
        for adopter in sorted(adopted):
            self.balancers[adopter].adopt_replicas(adopted[adopter])
            self._log(
                event="reassign",
                lb=adopter,
                **{"from": lb_id, "replicas": adopted[adopter]},
            )
        # Re-home the failed balancer's queue at the region's new front.
        fallback = self.region_lb_map[lb.config.region]
        entries = list(lb.queue)
        lb.queue.clear()
        delay = self._lat(lb.config.region, self.lb_region[fallback])
        for entry in entries:
            self._at(
                self.now + delay,
                partial(self._requeue_transferred, fallback, entry.view.id, entry.forwarded),
            )

    def _requeue_transferred(self, lb_id: str, request_id: str, forwarded: bool) -> None:
        lb = self.balancers[lb_id]
        if lb.down:
            self._client_send(request_id)
            return
        self._accept_at_lb(lb, request_id, forwarded=forwarded)

    def _recover_lb(self, lb_id: str) -> None:
        lb = self.balancers[lb_id]
        lb.down = False
        self._log(event="lb_up", lb=lb_id)
        self.region_lb_map[lb.config.region] = lb_id
        # Transfer home replicas back from their interim owners.
        returning: dict[str, list[str]] = {}
        for rid in sorted(self.home):
            if self.home[rid] == lb_id and self.owner[rid] != lb_id:
                returning.setdefault(self.owner[rid], []).append(rid)
                self.owner[rid] = lb_id
        for interim in sorted(returning):
            self.balancers[interim].release_replicas(returning[interim])
            self._log(
                event="reassign",
                lb=lb_id,
                **{"from": interim, "replicas": returning[interim]},
            )
        for replica_id in self.notice_buffer.pop(lb_id, []):
            lb.note_completion(replica_id)
        self._at(self.now, partial(self._monitor, lb_id))

    # -- main loop ---------------------------------------------------------

    def _workload_exhausted(self) -> bool:
        return (
            self.total_issued > 0
            and self.unfinished == 0
            and self._undone_programs == 0
            and self._open_loop_remaining == 0
        )

    def run(self) -> RunResult:
        horizon = self.scenario.horizon_ms
        horizon_reached = False
        while self.events:
            if self.events.next_time() > horizon:
                horizon_reached = True
                break
            time, action = self.events.pop()
            assert time >= self.now, "causality violation"
            self.now = time
            action()
            if self._workload_exhausted():
                break
        duration = horizon if horizon_reached else self.now
        summary = summarize(self.log, duration_ms=duration)
        return RunResult(
            event_log=self.log,
            summary=summary,
            duration_ms=duration,
            horizon_reached=horizon_reached,
            in_flight_at_end=self.unfinished,
        )


def run(scenario: Scenario) -> RunResult:
    """Execute one scenario to completion or to its horizon."""
    return Engine(scenario).run()
