"""Simulated inference replica: continuous batching over a token budget.

The replica stands in for a GPU server at routing-level fidelity. Memory is
counted purely in tokens. Admission reserves a request's whole eventual
footprint (uncached prompt plus output), which keeps the budget invariant
airtight without modeling preemption; the prompt prefix already resident in
the radix cache is pinned instead of re-allocated.

Timing model: a newly admitted request spends
``prefill_ms_per_token * (prompt_len - cached_prefix_len)`` milliseconds in
prefill, then joins batch-wide decode iterations of duration
``decode_base_ms + decode_ms_per_seq * |running_batch|``, producing one
token per iteration. Defaults put a 512-token uncached prefill at 300 ms.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from typing import Sequence

from .core import Request, synthetic_output_tokens

# 512 uncached prompt tokens == 300 ms of prefill.
DEFAULT_PREFILL_MS_PER_TOKEN = 300 / 512


@dataclass(frozen=True)
class ReplicaConfig:
    kv_budget_tokens: int = 18432
    prefill_ms_per_token: float = DEFAULT_PREFILL_MS_PER_TOKEN
    decode_base_ms: float = 20.0
    decode_ms_per_seq: float = 1.0
    region: str = "local"

    def __post_init__(self) -> None:
        if self.kv_budget_tokens < 1:
            raise ValueError("kv_budget_tokens must be positive")
        if self.prefill_ms_per_token <= 0:
            raise ValueError("prefill_ms_per_token must be positive")
        if self.decode_base_ms < 0 or self.decode_ms_per_seq < 0:
            raise ValueError("decode timing parameters must be non-negative")


class _CacheNode:
    __slots__ = ("children", "parent", "token", "locks", "last_access", "uid")

    def __init__(self, parent: "_CacheNode | None", token: int, uid: int) -> None:
        self.children: dict[int, _CacheNode] = {}
        self.parent = parent
        self.token = token
        self.locks = 0
        self.last_access = 0
        self.uid = uid


class RadixCache:
    """Token trie of resident KV prefixes with LRU leaf eviction.

    Nodes with a positive lock count belong to running requests and are
    never evicted; everything else is fair game, oldest access first.
    """

    def __init__(self) -> None:
        self._root = _CacheNode(None, -1, 0)
        self._uid = 0
        self._clock = 0
        self.resident = 0

    def match(self, tokens: Sequence[int], touch: bool = False) -> tuple[int, list[_CacheNode]]:
        if touch:
            self._clock += 1
        node = self._root
        path: list[_CacheNode] = []
        for tok in tokens:
            child = node.children.get(tok)
            if child is None:
                break
            if touch:
                child.last_access = self._clock
            path.append(child)
            node = child
        return len(path), path

    def lookup_len(self, tokens: Sequence[int]) -> int:
        return self.match(tokens, touch=False)[0]

    def insert(self, tokens: Sequence[int]) -> int:
        self._clock += 1
        node = self._root
        created = 0
        for tok in tokens:
            child = node.children.get(tok)
            if child is None:
                self._uid += 1
                child = _CacheNode(node, tok, self._uid)
                node.children[tok] = child
                created += 1
            child.last_access = self._clock
            node = child
        self.resident += created
        return created

    @staticmethod
    def lock(path: list[_CacheNode]) -> None:
        for node in path:
            node.locks += 1

    @staticmethod
    def unlock(path: list[_CacheNode]) -> None:
        for node in path:
            node.locks -= 1

    def evict(self, need: int) -> int:
        """Remove up to ``need`` unlocked tokens, LRU leaves first."""
        if need <= 0:
            return 0
        heap: list[tuple[int, int, _CacheNode]] = []
        stack = [self._root]
        while stack:
            node = stack.pop()
            for child in node.children.values():
                if child.children:
                    stack.append(child)
                elif child.locks == 0:
                    heap.append((child.last_access, child.uid, child))
        heapq.heapify(heap)
        freed = 0
        while heap and freed < need:
            _, _, node = heapq.heappop(heap)
            if node.children or node.locks > 0 or node.parent is None:
                continue
            del node.parent.children[node.token]
            freed += 1
            parent = node.parent
            if parent is not self._root and not parent.children and parent.locks == 0:
                heapq.heappush(heap, (parent.last_access, parent.uid, parent))
        self.resident -= freed
        return freed


@dataclass
class _Running:
    request: Request
    cached_len: int
    lock_path: list[_CacheNode]
    reserved: int
    ready_at: int
    generated: int = 0
    first_token_sent: bool = False

    @property
    def held_tokens(self) -> int:
        return (len(self.request.prompt) - self.cached_len) + self.generated

    @property
    def remaining_output(self) -> int:
        return self.request.output_len - self.generated


@dataclass(frozen=True)
class ReplicaEvent:
    kind: str  # admit | pend | first_token | complete
    request: Request
    cached_len: int = 0


class Replica:
    """One simulated replica, advanced by its owner through timed wakes.

    Call :meth:`admit` when a dispatch arrives and :meth:`advance` whenever
    the clock reaches :attr:`wake_at`; both return the events they caused.
    """

    def __init__(self, replica_id: str, config: ReplicaConfig | None = None) -> None:
        self.id = replica_id
        self.config = config or ReplicaConfig()
        self.cache = RadixCache()
        self.running: list[_Running] = []
        self.pending: deque[Request] = deque()
        self.wake_at: int | None = None
        self._iteration_end: int | None = None
        self._participants: list[_Running] = []

    # -- load signals ---------------------------------------------------

    def probe(self) -> tuple[int, int]:
        """(pending_count, outstanding_count) at this instant."""
        return len(self.pending), len(self.running) + len(self.pending)

    def cache_lookup(self, prompt: Sequence[int]) -> int:
        return self.cache.lookup_len(prompt)

    def reserved_tokens(self) -> int:
        return sum(r.reserved for r in self.running)

    def held_tokens(self) -> int:
        return sum(r.held_tokens for r in self.running)

    # -- admission ------------------------------------------------------

    def admit(self, request: Request, now: int) -> list[ReplicaEvent]:
        events: list[ReplicaEvent] = []
        # A non-empty pending queue means earlier requests are still waiting;
        # newcomers may not jump ahead of them.
        if self.pending or not self._try_admit(request, now, events):
            self.pending.append(request)
            events.append(ReplicaEvent("pend", request))
        self._reschedule(now)
        return events

    def _try_admit(self, request: Request, now: int, events: list[ReplicaEvent]) -> bool:
        budget = self.config.kv_budget_tokens
        if len(request.prompt) + request.output_len > budget:
            raise AssertionError(
                f"{self.id}: request {request.id} can never fit the kv budget"
            )
        cached, path = self.cache.match(request.prompt, touch=True)
        need = (len(request.prompt) - cached) + request.output_len
        self.cache.lock(path)
        free = budget - self.reserved_tokens() - self.cache.resident
        if need > free:
            self.cache.evict(need - free)
            free = budget - self.reserved_tokens() - self.cache.resident
        if need > free:
            self.cache.unlock(path)
            return False
        prefill_ms = round(self.config.prefill_ms_per_token * (len(request.prompt) - cached))
        self.running.append(
            _Running(
                request=request,
                cached_len=cached,
                lock_path=path,
                reserved=need,
                ready_at=now + prefill_ms,
            )
        )
        events.append(ReplicaEvent("admit", request, cached_len=cached))
        return True

    def _promote_pending(self, now: int, events: list[ReplicaEvent]) -> None:
        # FIFO: only the head is considered, no lookahead.
        while self.pending and self._try_admit(self.pending[0], now, events):
            self.pending.popleft()

    # -- time advancement -----------------------------------------------

    def _decode_ready(self, now: int) -> list[_Running]:
        return [r for r in self.running if r.ready_at <= now and r.remaining_output > 0]

    def _iteration_ms(self) -> int:
        d = self.config.decode_base_ms + self.config.decode_ms_per_seq * len(self.running)
        return max(1, round(d))

    def _reschedule(self, now: int) -> None:
        if self._iteration_end is not None:
            self.wake_at = self._iteration_end
            return
        ready = self._decode_ready(now)
        if ready:
            # Start an iteration immediately.
            self._participants = ready
            self._iteration_end = now + self._iteration_ms()
            self.wake_at = self._iteration_end
            return
        upcoming = [r.ready_at for r in self.running if r.remaining_output > 0]
        self.wake_at = min(upcoming) if upcoming else None

    def advance(self, now: int) -> list[ReplicaEvent]:
        events: list[ReplicaEvent] = []
        if self._iteration_end is not None and now >= self._iteration_end:
            completed: list[_Running] = []
            for r in self._participants:
                r.generated += 1
                if not r.first_token_sent:
                    r.first_token_sent = True
                    events.append(ReplicaEvent("first_token", r.request))
                if r.remaining_output == 0:
                    completed.append(r)
            self._iteration_end = None
            self._participants = []
            for r in completed:
                self._complete(r, events)
            if completed:
                self._promote_pending(now, events)
        self._reschedule(now)
        return events

    def _complete(self, r: _Running, events: list[ReplicaEvent]) -> None:
        self.running.remove(r)
        self.cache.unlock(r.lock_path)
        full = tuple(r.request.prompt) + synthetic_output_tokens(r.request.id, r.request.output_len)
        self.cache.insert(full)
        events.append(ReplicaEvent("complete", r.request))

    # -- checks ----------------------------------------------------------

    def check_invariants(self) -> None:
        budget = self.config.kv_budget_tokens
        held = self.held_tokens()
        reserved = self.reserved_tokens()
        if held > reserved:
            raise AssertionError(f"{self.id}: held {held} exceeds reserved {reserved}")
        if reserved + self.cache.resident > budget:
            raise AssertionError(
                f"{self.id}: reserved {reserved} + cache {self.cache.resident} > budget {budget}"
            )
        if self.pending:
            head = self.pending[0]
            cached = self.cache.lookup_len(head.prompt)
            need = (len(head.prompt) - cached) + head.output_len
            evictable = self._evictable_tokens()
            free = budget - reserved - self.cache.resident + evictable
            if need <= free:
                raise AssertionError(f"{self.id}: pending head would fit but was not admitted")

    def _evictable_tokens(self) -> int:
        # A node can be freed only if it and its whole subtree are unlocked
        # (eviction proceeds leaf-up and stops at locked nodes). Iterative
        # post-order: results[node] = (freeable_in_subtree, subtree_all_free).
        results: dict[int, tuple[int, bool]] = {}
        stack: list[tuple[_CacheNode, bool]] = [(self.cache._root, False)]
        while stack:
            node, expanded = stack.pop()
            if not expanded:
                stack.append((node, True))
                for child in node.children.values():
                    stack.append((child, False))
                continue
            total = 0
            all_free = True
            for child in node.children.values():
                c_total, c_free = results.pop(id(child))
                total += c_total
                child_free = c_free and child.locks == 0
                if child_free:
                    total += 1
                all_free = all_free and child_free
            results[id(node)] = (total, all_free)
        return results[id(self.cache._root)][0]
