"""Candidate-selection policies and pushing modes.

A policy combines a selector (how to pick among available targets) with a
pushing mode (when a target counts as available at all):

  selectors: rr | ll | ch | prefix
  pushing:   bp | sp-o:<limit> | sp-p

Config strings join the two with a slash, e.g. ``prefix/sp-p`` or
``ll/sp-o:32``. The prefix selector falls back to least-load whenever the
best prefix hit ratio is below its threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import RequestView
from .ring import HashRing, NoAvailableTarget
from .trie import PrefixTrie

SELECTORS = ("rr", "ll", "ch", "prefix")
PUSH_MODES = ("bp", "sp-o", "sp-p")

DEFAULT_SP_O_LIMIT = 32
DEFAULT_FALLBACK_THRESHOLD = 0.5


@dataclass(frozen=True)
class PolicyKind:
    selector: str
    pushing: str
    sp_o_limit: int = DEFAULT_SP_O_LIMIT
    fallback_threshold: float = DEFAULT_FALLBACK_THRESHOLD

    def __post_init__(self) -> None:
        if self.selector not in SELECTORS:
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.pushing not in PUSH_MODES:
            raise ValueError(f"unknown pushing mode {self.pushing!r}")
        if self.sp_o_limit < 1:
            raise ValueError("sp-o limit must be positive")

    def __str__(self) -> str:
        push = self.pushing
        if push == "sp-o":
            push = f"sp-o:{self.sp_o_limit}"
        return f"{self.selector}/{push}"


def parse_policy(spec: str) -> PolicyKind:
    """Parse strings like ``rr/bp``, ``ch/sp-p``, ``ll/sp-o:32``."""
    try:
        selector, push = spec.split("/")
    except ValueError:
        raise ValueError(f"policy {spec!r} must look like '<selector>/<pushing>'") from None
    limit = DEFAULT_SP_O_LIMIT
    if push.startswith("sp-o:"):
        limit = int(push.split(":", 1)[1])
        push = "sp-o"
    return PolicyKind(selector=selector, pushing=push, sp_o_limit=limit)


@dataclass
class TargetStats:
    target_id: str
    outstanding_count: int = 0
    pending_count: int = 0
    available: bool = True


# Ordered per-target stats, as assembled by the owning balancer.
CandidateSet = list[TargetStats]


@dataclass
class PolicyState:
    """Mutable per-layer selection state owned by one balancer."""

    ring: HashRing | None = None
    trie: PrefixTrie | None = None
    rr_last: str | None = None


def _least_load(candidates: list[TargetStats]) -> str:
    return min(candidates, key=lambda c: (c.outstanding_count, c.target_id)).target_id


def select_candidate(
    view: RequestView,
    candidates: CandidateSet,
    kind: PolicyKind,
    state: PolicyState,
) -> str | None:
    """Pick a target among the available candidates, or None if there are none."""
    avail = [c for c in candidates if c.available]
    if not avail:
        return None

    if kind.selector == "rr":
        ordered = sorted(c.target_id for c in avail)
        nxt = [t for t in ordered if state.rr_last is None or t > state.rr_last]
        pick = nxt[0] if nxt else ordered[0]
        state.rr_last = pick
        return pick

    if kind.selector == "ll":
        return _least_load(avail)

    if kind.selector == "ch":
        if state.ring is None:
            raise ValueError("ch selector requires a hash ring")
        try:
            return state.ring.lookup(view.session_key, {c.target_id for c in avail})
        except NoAvailableTarget:
            return None

    # prefix selector
    if state.trie is None:
        raise ValueError("prefix selector requires a trie")
    match = state.trie.max_prefix_match(
        view.prompt,
        {c.target_id for c in avail},
        outstanding={c.target_id: c.outstanding_count for c in avail},
    )
    if match is None or match.hit_ratio < kind.fallback_threshold:
        return _least_load(avail)
    return match.target_id
