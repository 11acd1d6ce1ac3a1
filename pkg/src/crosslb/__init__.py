"""crosslb: a simulator for locality-aware cross-region LLM load balancing.

Library surface: consistent-hash ring and prefix-trie placement kernels,
pluggable routing policies with selective pushing, a simulated continuous-
batching replica, a deterministic discrete-event engine, workload
generators, and metric/cost analyzers. The ``crosslb`` CLI runs scenario
files; see README for the schema and presets.
"""

from .core import (
    Request,
    RequestTimeline,
    RequestView,
    TokenSeq,
    pairwise_similarity_stats,
    prefix_similarity,
)
from .ring import HashRing, NoAvailableTarget
from .trie import MatchResult, PrefixTrie
from .policy import CandidateSet, PolicyKind, PolicyState, TargetStats, parse_policy, select_candidate
from .replica import Replica, ReplicaConfig
from .balancer import Balancer, BalancerConfig, PeerProbe, ReplicaProbe, RoutingDecision
from .scenario import LatencyMatrix, Scenario, ScenarioError, load_scenario, parse_scenario
from .simnet import Engine, RunResult, run
from .metrics import CostModel, RunSummary, provisioning_cost, summarize
from .workload import (
    ConversationSpec,
    DiurnalSpec,
    LengthDist,
    TreeSpec,
    gen_conversations,
    gen_diurnal,
    gen_tot,
    load_trace,
    save_trace,
)

__version__ = "0.1.0"

__all__ = [
    "Balancer",
    "BalancerConfig",
    "CandidateSet",
    "ConversationSpec",
    "CostModel",
    "DiurnalSpec",
    "Engine",
    "HashRing",
    "LatencyMatrix",
    "LengthDist",
    "MatchResult",
    "NoAvailableTarget",
    "PeerProbe",
    "PolicyKind",
    "PolicyState",
    "PrefixTrie",
    "Replica",
    "ReplicaConfig",
    "ReplicaProbe",
    "Request",
    "RequestTimeline",
    "RequestView",
    "RoutingDecision",
    "RunResult",
    "RunSummary",
    "Scenario",
    "ScenarioError",
    "TargetStats",
    "TokenSeq",
    "TreeSpec",
    "gen_conversations",
    "gen_diurnal",
    "gen_tot",
    "load_scenario",
    "load_trace",
    "pairwise_similarity_stats",
    "parse_policy",
    "parse_scenario",
    "prefix_similarity",
    "provisioning_cost",
    "run",
    "save_trace",
    "select_candidate",
    "summarize",
]
