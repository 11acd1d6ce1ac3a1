"""Shared domain types: requests, timelines, and prefix similarity.

Prompts are sequences of abstract integer token ids; no tokenizer is
involved anywhere. All simulated time is integer milliseconds.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Mapping, Sequence

from .hashing import token_stream

# A prompt is an ordered sequence of non-negative token ids.
TokenSeq = tuple[int, ...]


def synthetic_output_tokens(request_id: str, output_len: int) -> TokenSeq:
    """Content of a request's generated tokens, derived from its id.

    Replica caches and workload builders both call this, so a later prompt
    that embeds an earlier request's output matches the tokens the replica
    put in its cache, without traces having to carry output text.
    """
    return token_stream(f"{request_id}:out", output_len)


def common_prefix_len(a: Sequence[int], b: Sequence[int]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def prefix_similarity(a: Sequence[int], b: Sequence[int]) -> float:
    """Normalized shared-prefix length of two token sequences.

    Returns len(common_prefix(a, b)) / min(len(a), len(b)), so the result
    is 1.0 exactly when one sequence is a prefix of the other.
    """
    if not a or not b:
        raise ValueError("prefix_similarity requires non-empty sequences")
    return common_prefix_len(a, b) / min(len(a), len(b))


def pairwise_similarity_stats(
    groups: Mapping[str, Sequence[Sequence[int]]],
) -> dict[tuple[str, str], float]:
    """Mean prefix similarity for every ordered pair of group labels.

    The (g, g) diagonal averages over distinct unordered pairs within the
    group; off-diagonal cells average over the full cross product. Cells
    with no pairs (single-element group on the diagonal) are omitted.
    """
    if not groups:
        raise ValueError("at least one group required")
    for label, seqs in groups.items():
        if not seqs:
            raise ValueError(f"group {label!r} is empty")

    stats: dict[tuple[str, str], float] = {}
    labels = list(groups)
    for ga in labels:
        seqs_a = groups[ga]
        if len(seqs_a) > 1:
            sims = [prefix_similarity(x, y) for x, y in combinations(seqs_a, 2)]
            stats[(ga, ga)] = sum(sims) / len(sims)
        for gb in labels:
            if gb == ga:
                continue
            sims = [prefix_similarity(x, y) for x in seqs_a for y in groups[gb]]
            stats[(ga, gb)] = sum(sims) / len(sims)
    return stats


@dataclass(frozen=True)
class Request:
    """One inference job as the simulator sees it.

    ``output_len`` is ground truth used to drive the replica model; routing
    code only ever receives the :class:`RequestView` produced by
    :meth:`view`, which omits it.
    """

    id: str
    session_key: str
    origin_region: str
    prompt: TokenSeq
    output_len: int
    arrival_time: int

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError(f"request {self.id}: empty prompt")
        if self.output_len < 1:
            raise ValueError(f"request {self.id}: output_len must be >= 1")

    def view(self) -> "RequestView":
        return RequestView(
            id=self.id,
            session_key=self.session_key,
            origin_region=self.origin_region,
            prompt=self.prompt,
            arrival_time=self.arrival_time,
        )


@dataclass(frozen=True)
class RequestView:
    """Balancer-facing projection of a request; excludes output_len."""

    id: str
    session_key: str
    origin_region: str
    prompt: TokenSeq
    arrival_time: int


@dataclass
class RequestTimeline:
    """Lifecycle timestamps of one request, all in simulated ms."""

    request_id: str
    arrival_time: int
    lb_dequeue_time: int | None = None
    replica_admit_time: int | None = None
    first_token_time: int | None = None
    completion_time: int | None = None
    served_by: str | None = None
    forwarded_via: str | None = None
    cached_prefix_len: int = 0
    prompt_len: int = 0
    output_len: int = 0

    @property
    def ttft(self) -> int | None:
        if self.first_token_time is None:
            return None
        return self.first_token_time - self.arrival_time

    @property
    def e2e(self) -> int | None:
        if self.completion_time is None:
            return None
        return self.completion_time - self.arrival_time

    def check_monotone(self) -> None:
        order = [
            self.arrival_time,
            self.lb_dequeue_time,
            self.replica_admit_time,
            self.first_token_time,
            self.completion_time,
        ]
        present = [t for t in order if t is not None]
        for earlier, later in zip(present, present[1:]):
            if later < earlier:
                raise AssertionError(
                    f"request {self.request_id}: non-monotone timeline {order}"
                )


def as_token_seq(tokens: Iterable[int]) -> TokenSeq:
    seq = tuple(int(t) for t in tokens)
    if any(t < 0 for t in seq):
        raise ValueError("token ids must be non-negative")
    return seq
