"""Per-region load balancer: FCFS queue, probing, and two-layer routing.

Routing order is strict: if any local replica is available the request is
placed locally; otherwise, if the request has not been forwarded before and
some peer balancer is available, it is forwarded there (one hop at most);
otherwise it stays queued and the head is re-evaluated on the next
availability change or arrival.

Availability is always the last-probed state. Under sp-p a replica is
available iff its last probe reported zero pending requests; under sp-o iff
its probed outstanding count is below the limit; under bp every owned
replica is always available. A peer is available iff its last probe showed
at least one available replica and a queue no longer than the small buffer
tau. Targets that have never answered, or whose answer has gone stale, are
treated as unavailable.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .core import RequestView
from .policy import PolicyKind, PolicyState, TargetStats, select_candidate
from .ring import HashRing
from .trie import PrefixTrie

DEFAULT_PROBE_INTERVAL_MS = 50
DEFAULT_QUEUE_BUFFER_TAU = 2


@dataclass(frozen=True)
class BalancerConfig:
    lb_id: str
    region: str
    policy: PolicyKind
    probe_interval_ms: int = DEFAULT_PROBE_INTERVAL_MS
    queue_buffer_tau: int = DEFAULT_QUEUE_BUFFER_TAU
    trie_max_size: int = 100_000
    snapshot_trie_max_size: int | None = None  # defaults to trie_max_size
    vnodes_per_target: int = 100
    seed: int = 0
    cross_region: bool = True

    def __post_init__(self) -> None:
        if self.probe_interval_ms < 1:
            raise ValueError("probe_interval_ms must be >= 1")
        if self.queue_buffer_tau < 0:
            raise ValueError("queue_buffer_tau must be non-negative")


@dataclass(frozen=True)
class ReplicaProbe:
    replica_id: str
    pending_count: int
    outstanding_count: int


@dataclass(frozen=True)
class PeerProbe:
    balancer_id: str
    n_avail_replica: int
    queue_size: int


@dataclass
class AvailabilitySets:
    local_avail: set[str] = field(default_factory=set)
    remote_avail: set[str] = field(default_factory=set)
    replica_probe: dict[str, tuple[int, int]] = field(default_factory=dict)
    peer_probe: dict[str, tuple[int, int]] = field(default_factory=dict)
    last_heard: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class RoutingDecision:
    kind: str  # "local" | "forward" | "enqueue"
    target: str | None = None

    LOCAL = "local"
    FORWARD = "forward"
    ENQUEUE = "enqueue"


@dataclass
class QueueEntry:
    view: RequestView
    forwarded: bool
    enqueued_at: int
    seq: int


class Balancer:
    """State machine for one regional balancer; the engine drives it."""

    def __init__(
        self,
        config: BalancerConfig,
        replica_ids: Iterable[str],
        peers: Mapping[str, str],
        stale_after_ms: Mapping[str, int] | None = None,
    ) -> None:
        self.config = config
        self.replicas = sorted(replica_ids)
        if not self.replicas:
            raise ValueError(f"{config.lb_id}: needs at least one replica")
        self.peers = dict(sorted(peers.items()))
        self.queue: deque[QueueEntry] = deque()
        self.availability = AvailabilitySets()
        self.outstanding: dict[str, int] = {r: 0 for r in self.replicas}
        self.down = False
        self._enqueue_seq = 0
        # Staleness windows per probe target; unset targets never go stale.
        self._stale_after = dict(stale_after_ms or {})

        snap_max = (
            config.snapshot_trie_max_size
            if config.snapshot_trie_max_size is not None
            else config.trie_max_size
        )
        self.local_trie = PrefixTrie(config.trie_max_size)
        self.snapshot_trie = PrefixTrie(snap_max)
        self.local_ring = HashRing.build(self.replicas, config.vnodes_per_target, config.seed)
        self.remote_ring = (
            HashRing.build(self.peers, config.vnodes_per_target, config.seed)
            if self.peers
            else None
        )
        self._local_policy = PolicyState(ring=self.local_ring, trie=self.local_trie)
        self._remote_policy = PolicyState(ring=self.remote_ring, trie=self.snapshot_trie)

    # -- queue ------------------------------------------------------------

    def enqueue(self, view: RequestView, now: int, forwarded: bool = False) -> QueueEntry:
        self._enqueue_seq += 1
        entry = QueueEntry(view=view, forwarded=forwarded, enqueued_at=now, seq=self._enqueue_seq)
        self.queue.append(entry)
        return entry

    def decide_head(self) -> RoutingDecision:
        """Evaluate the queue head; commits selection state on a dispatch.

        The caller pops the head and acts when the decision is local or
        forward, and stops pumping on enqueue.
        """
        if not self.queue:
            raise ValueError("decide_head on empty queue")
        entry = self.queue[0]
        view = entry.view

        local_avail = sorted(self.availability.local_avail)
        if local_avail:
            candidates = [
                TargetStats(
                    target_id=r,
                    outstanding_count=self.outstanding.get(r, 0),
                    pending_count=self.availability.replica_probe.get(r, (0, 0))[0],
                )
                for r in local_avail
            ]
            target = select_candidate(view, candidates, self.config.policy, self._local_policy)
            if target is not None:
                self.local_trie.insert(view.prompt, target)
                self.outstanding[target] = self.outstanding.get(target, 0) + 1
                return RoutingDecision(RoutingDecision.LOCAL, target)

        if self.config.cross_region and not entry.forwarded:
            remote_avail = sorted(self.availability.remote_avail)
            if remote_avail:
                # Peer load proxy: the queue size from its last probe.
                candidates = [
                    TargetStats(
                        target_id=p,
                        outstanding_count=self.availability.peer_probe.get(p, (0, 0))[1],
                    )
                    for p in remote_avail
                ]
                target = select_candidate(view, candidates, self.config.policy, self._remote_policy)
                if target is not None:
                    self.snapshot_trie.insert(view.prompt, target)
                    return RoutingDecision(RoutingDecision.FORWARD, target)

        return RoutingDecision(RoutingDecision.ENQUEUE)

    def pop_head(self) -> QueueEntry:
        return self.queue.popleft()

    # -- probing ----------------------------------------------------------

    def probe_response(self) -> tuple[int, int]:
        """(number of available local replicas, queue size) right now."""
        return len(self.availability.local_avail), len(self.queue)

    def on_replica_probe(self, probe: ReplicaProbe, now: int) -> None:
        if probe.replica_id not in self.outstanding:
            return  # ownership changed while the probe was in flight
        self.availability.replica_probe[probe.replica_id] = (
            probe.pending_count,
            probe.outstanding_count,
        )
        self.availability.last_heard[probe.replica_id] = now

    def on_peer_probe(self, probe: PeerProbe, now: int) -> None:
        if probe.balancer_id not in self.peers:
            return
        self.availability.peer_probe[probe.balancer_id] = (
            probe.n_avail_replica,
            probe.queue_size,
        )
        self.availability.last_heard[probe.balancer_id] = now

    def monitor_tick(
        self,
        probe_results: Iterable[ReplicaProbe | PeerProbe],
        now: int = 0,
    ) -> AvailabilitySets:
        """Apply a batch of probe results and refresh both availability sets."""
        for probe in probe_results:
            if isinstance(probe, ReplicaProbe):
                self.on_replica_probe(probe, now)
            else:
                self.on_peer_probe(probe, now)
        self.recompute_availability(now)
        return self.availability

    def recompute_availability(self, now: int = 0) -> bool:
        """Rebuild both sets from last-probe state; True if anything changed."""
        av = self.availability
        mode = self.config.policy.pushing
        local: set[str] = set()
        for r in self.replicas:
            if mode == "bp":
                local.add(r)
                continue
            sample = av.replica_probe.get(r)
            if sample is None or self._stale(r, now):
                continue
            pending, outstanding = sample
            if mode == "sp-p" and pending == 0:
                local.add(r)
            elif mode == "sp-o" and outstanding < self.config.policy.sp_o_limit:
                local.add(r)
        remote: set[str] = set()
        tau = self.config.queue_buffer_tau
        for p in self.peers:
            sample = av.peer_probe.get(p)
            if sample is None or self._stale(p, now):
                continue
            n_avail, qsize = sample
            if n_avail > 0 and qsize <= tau:
                remote.add(p)
        changed = local != av.local_avail or remote != av.remote_avail
        av.local_avail = local
        av.remote_avail = remote
        return changed

    def _stale(self, target: str, now: int) -> bool:
        window = self._stale_after.get(target)
        if window is None:
            return False
        return now - self.availability.last_heard.get(target, -(1 << 60)) > window

    # -- dispatch bookkeeping ----------------------------------------------

    def note_completion(self, replica_id: str) -> None:
        if replica_id in self.outstanding and self.outstanding[replica_id] > 0:
            self.outstanding[replica_id] -= 1

    # -- replica ownership (controller-driven) ------------------------------

    def adopt_replicas(self, replica_ids: Iterable[str]) -> None:
        added = [r for r in sorted(replica_ids) if r not in self.outstanding]
        for r in added:
            self.replicas.append(r)
            self.outstanding[r] = 0
            self.local_ring = self.local_ring.add_target(r)
        self.replicas.sort()
        self._local_policy.ring = self.local_ring

    def release_replicas(self, replica_ids: Iterable[str]) -> None:
        leaving = {r for r in replica_ids if r in self.outstanding}
        keep = [r for r in self.replicas if r not in leaving]
        if not keep:
            raise ValueError(f"{self.config.lb_id}: cannot release every replica")
        for r in sorted(leaving):
            self.local_ring = self.local_ring.remove_target(r)
            del self.outstanding[r]
            self.availability.replica_probe.pop(r, None)
            self.availability.last_heard.pop(r, None)
        self.replicas = keep
        self.local_trie.rebuild_for_targets(keep)
        self._local_policy.ring = self.local_ring
        self.recompute_availability()
