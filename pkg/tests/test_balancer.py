import pytest

from crosslb.balancer import (
    Balancer,
    BalancerConfig,
    PeerProbe,
    ReplicaProbe,
    RoutingDecision,
)
from crosslb.core import RequestView
from crosslb.policy import parse_policy


def make_balancer(policy="ll/sp-p", replicas=("r0", "r1"), peers=None, tau=2, **kwargs):
    config = BalancerConfig(
        lb_id="lb-us",
        region="us",
        policy=parse_policy(policy),
        queue_buffer_tau=tau,
        **kwargs,
    )
    return Balancer(config, replicas, peers or {})


def view(rid="q0", prompt=(1, 2, 3), session="s"):
    return RequestView(id=rid, session_key=session, origin_region="us", prompt=tuple(prompt), arrival_time=0)


def test_replica_with_zero_pending_becomes_available():
    lb = make_balancer()
    av = lb.monitor_tick([ReplicaProbe("r0", pending_count=0, outstanding_count=3)])
    assert av.local_avail == {"r0"}


def test_replica_with_pending_is_removed():
    lb = make_balancer()
    lb.monitor_tick([ReplicaProbe("r0", 0, 1), ReplicaProbe("r1", 0, 0)])
    av = lb.monitor_tick([ReplicaProbe("r0", 3, 5)])
    assert av.local_avail == {"r1"}


def test_peer_with_long_queue_removed():
    lb = make_balancer(peers={"lb-eu": "eu"}, tau=2)
    av = lb.monitor_tick([PeerProbe("lb-eu", n_avail_replica=2, queue_size=2)])
    assert av.remote_avail == {"lb-eu"}
    av = lb.monitor_tick([PeerProbe("lb-eu", n_avail_replica=2, queue_size=3)])
    assert av.remote_avail == set()
    av = lb.monitor_tick([PeerProbe("lb-eu", n_avail_replica=0, queue_size=0)])
    assert av.remote_avail == set()


def test_unprobed_targets_start_unavailable():
    lb = make_balancer()
    assert lb.availability.local_avail == set()


def test_blind_pushing_ignores_probes():
    lb = make_balancer(policy="ll/bp")
    lb.recompute_availability()
    assert lb.availability.local_avail == {"r0", "r1"}
    lb.monitor_tick([ReplicaProbe("r0", 99, 99)])
    assert lb.availability.local_avail == {"r0", "r1"}


def test_sp_o_uses_probed_outstanding_against_limit():
    lb = make_balancer(policy="ll/sp-o:4")
    av = lb.monitor_tick([ReplicaProbe("r0", 0, 3), ReplicaProbe("r1", 0, 4)])
    assert av.local_avail == {"r0"}


def test_stale_probe_expires_target():
    lb = Balancer(
        BalancerConfig(lb_id="lb-us", region="us", policy=parse_policy("ll/sp-p")),
        ["r0"],
        {},
        stale_after_ms={"r0": 100},
    )
    lb.monitor_tick([ReplicaProbe("r0", 0, 0)], now=0)
    assert lb.availability.local_avail == {"r0"}
    lb.recompute_availability(now=101)
    assert lb.availability.local_avail == set()


def test_local_first_even_when_peers_available():
    lb = make_balancer(peers={"lb-eu": "eu"})
    lb.monitor_tick([ReplicaProbe("r0", 0, 0), PeerProbe("lb-eu", 2, 0)])
    lb.enqueue(view(), now=0)
    decision = lb.decide_head()
    assert decision.kind == RoutingDecision.LOCAL
    assert decision.target == "r0"


def test_forward_when_local_full_and_snapshot_updated():
    lb = make_balancer(peers={"lb-eu": "eu"})
    lb.monitor_tick([ReplicaProbe("r0", 2, 5), ReplicaProbe("r1", 1, 4), PeerProbe("lb-eu", 2, 0)])
    lb.enqueue(view(prompt=(7, 8, 9)), now=0)
    decision = lb.decide_head()
    assert decision.kind == RoutingDecision.FORWARD
    assert decision.target == "lb-eu"
    match = lb.snapshot_trie.max_prefix_match((7, 8, 9), {"lb-eu"})
    assert match is not None and match.matched_len == 3


def test_enqueue_when_nothing_available():
    lb = make_balancer(peers={"lb-eu": "eu"})
    lb.enqueue(view(), now=0)
    assert lb.decide_head().kind == RoutingDecision.ENQUEUE
    assert len(lb.queue) == 1


def test_snapshot_trie_prefers_peer_with_matching_prefix():
    lb = make_balancer(policy="prefix/sp-p", peers={"lb-eu": "eu", "lb-asia": "asia"})
    # Seed the snapshot with history: this prompt family went to lb-asia.
    lb.snapshot_trie.insert((5, 5, 5, 5, 5, 5, 5, 5, 5, 5), "lb-asia")
    lb.snapshot_trie.insert((6, 6), "lb-eu")
    lb.monitor_tick(
        [
            ReplicaProbe("r0", 1, 9),
            ReplicaProbe("r1", 1, 9),
            PeerProbe("lb-eu", 1, 0),
            PeerProbe("lb-asia", 1, 0),
        ]
    )
    lb.enqueue(view(prompt=(5, 5, 5, 5, 5, 5, 5, 5, 9, 9)), now=0)
    decision = lb.decide_head()
    assert decision.kind == RoutingDecision.FORWARD
    assert decision.target == "lb-asia"


def test_forwarded_requests_never_forward_again():
    lb = make_balancer(peers={"lb-eu": "eu"})
    lb.monitor_tick([PeerProbe("lb-eu", 2, 0)])  # locals unprobed: unavailable
    lb.enqueue(view(), now=0, forwarded=True)
    assert lb.decide_head().kind == RoutingDecision.ENQUEUE
    # A local replica freeing up lets it through.
    lb.monitor_tick([ReplicaProbe("r0", 0, 0)])
    assert lb.decide_head().kind == RoutingDecision.LOCAL


def test_no_cross_region_never_forwards():
    lb = make_balancer(peers={"lb-eu": "eu"}, cross_region=False)
    lb.monitor_tick([PeerProbe("lb-eu", 2, 0)])
    lb.enqueue(view(), now=0)
    assert lb.decide_head().kind == RoutingDecision.ENQUEUE


def test_probe_response_counts_avail_and_queue():
    lb = make_balancer(replicas=("r0", "r1", "r2"))
    lb.monitor_tick([ReplicaProbe(r, 0, 0) for r in ("r0", "r1", "r2")])
    assert lb.probe_response() == (3, 0)
    lb.monitor_tick([ReplicaProbe(r, 1, 8) for r in ("r0", "r1", "r2")])
    for i in range(5):
        lb.enqueue(view(rid=f"q{i}"), now=0)
    assert lb.probe_response() == (0, 5)


def test_dispatch_updates_outstanding_and_local_trie():
    lb = make_balancer(policy="prefix/sp-p")
    lb.monitor_tick([ReplicaProbe("r0", 0, 0), ReplicaProbe("r1", 0, 0)])
    lb.enqueue(view(prompt=(1, 2, 3, 4)), now=0)
    decision = lb.decide_head()
    lb.pop_head()
    assert decision.kind == RoutingDecision.LOCAL
    assert lb.outstanding[decision.target] == 1
    assert lb.local_trie.max_prefix_match((1, 2, 3, 4), {decision.target}).matched_len == 4
    lb.note_completion(decision.target)
    assert lb.outstanding[decision.target] == 0


def test_fcfs_order_preserved():
    lb = make_balancer()
    for i in range(4):
        lb.enqueue(view(rid=f"q{i}"), now=i)
    lb.monitor_tick([ReplicaProbe("r0", 0, 0), ReplicaProbe("r1", 0, 0)])
    served = []
    while lb.queue:
        decision = lb.decide_head()
        assert decision.kind == RoutingDecision.LOCAL
        served.append(lb.pop_head().view.id)
    assert served == ["q0", "q1", "q2", "q3"]


def test_adopt_and_release_round_trip():
    lb = make_balancer()
    before_entries = lb.local_ring.entries
    lb.adopt_replicas(["r-eu-0", "r-eu-1"])
    assert set(lb.replicas) == {"r0", "r1", "r-eu-0", "r-eu-1"}
    assert lb.local_ring.targets == {"r0", "r1", "r-eu-0", "r-eu-1"}
    lb.monitor_tick([ReplicaProbe("r-eu-0", 0, 0)])
    assert lb.availability.local_avail == {"r-eu-0"}
    lb.release_replicas(["r-eu-0", "r-eu-1"])
    assert set(lb.replicas) == {"r0", "r1"}
    assert lb.local_ring.entries == before_entries
    assert lb.availability.local_avail == set()


def test_release_rebuilds_trie_without_foreign_targets():
    lb = make_balancer(policy="prefix/sp-p")
    lb.adopt_replicas(["rx"])
    lb.local_trie.insert((1, 2), "rx")
    lb.local_trie.insert((3, 4), "r0")
    lb.release_replicas(["rx"])
    assert lb.local_trie.max_prefix_match((1, 2), {"r0", "r1"}).matched_len == 0
    assert lb.local_trie.max_prefix_match((3, 4), {"r0"}).matched_len == 2


def test_cannot_release_everything():
    lb = make_balancer()
    with pytest.raises(ValueError):
        lb.release_replicas(["r0", "r1"])


def test_needs_at_least_one_replica():
    with pytest.raises(ValueError):
        make_balancer(replicas=())
