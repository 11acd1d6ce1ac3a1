"""Token prefix trie annotated with routing targets.

Each insertion records one (prompt path, target) pair; the target is noted
on every node along the path, so the target set of a child node is always
a subset of its parent's. That subset property is what makes the pruned
longest-prefix traversal exact. The tree is bounded by a token-edge budget
and evicts whole insertion records oldest-first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

from .core import TokenSeq


@dataclass(frozen=True)
class MatchResult:
    target_id: str
    matched_len: int
    hit_ratio: float


class _Node:
    __slots__ = ("children", "seqs")

    def __init__(self) -> None:
        self.children: dict[int, _Node] = {}
        # target -> seq numbers of retained records passing through here
        self.seqs: dict[str, set[int]] = {}


class PrefixTrie:
    """Bounded trie mapping token prefixes to the targets that served them.

    Size is counted in token edges (one per non-root node). A record is one
    whole insertion; re-inserting the same (path, target) refreshes its age
    instead of duplicating it.
    """

    def __init__(self, max_size: int = 100_000) -> None:
        if max_size < 0:
            raise ValueError("max_size must be non-negative")
        self.max_size = max_size
        self._root = _Node()
        self._size = 0
        self._next_seq = 0
        # (path, target) -> seq; insertion order is eviction order (oldest first)
        self._records: dict[tuple[TokenSeq, str], int] = {}

    @property
    def size(self) -> int:
        return self._size

    def records(self) -> list[tuple[TokenSeq, str, int]]:
        """Retained insertions, oldest first."""
        return [(path, target, seq) for (path, target), seq in self._records.items()]

    def insert(self, tokens: Sequence[int], target_id: str) -> None:
        if not tokens:
            raise ValueError("cannot insert an empty token sequence")
        path = tuple(tokens)
        key = (path, target_id)
        if key in self._records:
            self._remove_record(key)
        seq = self._next_seq
        self._next_seq += 1
        self._records[key] = seq
        node = self._root
        node.seqs.setdefault(target_id, set()).add(seq)
        for tok in path:
            child = node.children.get(tok)
            if child is None:
                child = _Node()
                node.children[tok] = child
                self._size += 1
            child.seqs.setdefault(target_id, set()).add(seq)
            node = child
        self.evict_to_limit()

    def evict_to_limit(self) -> None:
        while self._size > self.max_size and self._records:
            oldest = next(iter(self._records))
            self._remove_record(oldest)

    def _remove_record(self, key: tuple[TokenSeq, str]) -> None:
        path, target = key
        seq = self._records.pop(key)
        nodes = [self._root]
        node = self._root
        for tok in path:
            node = node.children[tok]
            nodes.append(node)
        for n in nodes:
            bucket = n.seqs[target]
            bucket.discard(seq)
            if not bucket:
                del n.seqs[target]
        # Prune emptied nodes deepest-first; an empty node cannot have
        # children off this path (their target sets would be subsets of it).
        for i in range(len(nodes) - 1, 0, -1):
            if nodes[i].seqs:
                break
            del nodes[i - 1].children[path[i - 1]]
            self._size -= 1

    def max_prefix_match(
        self,
        tokens: Sequence[int],
        available: Iterable[str],
        outstanding: Mapping[str, int] | None = None,
        prune: bool = True,
    ) -> MatchResult | None:
        """Deepest available target along ``tokens``; None if no available
        target is recorded anywhere in the trie.

        Traversal stops as soon as a node has no available target (the
        subset property guarantees none appear deeper); ``prune=False``
        descends regardless and must give the same answer.

        Ties at equal depth go to the target with the fewest outstanding
        requests, then the lowest target id.
        """
        if not tokens:
            raise ValueError("cannot match an empty token sequence")
        avail = set(available)
        best = {t for t in self._root.seqs if t in avail}
        if not best:
            return None
        best_depth = 0
        node = self._root
        depth = 0
        for tok in tokens:
            child = node.children.get(tok)
            if child is None:
                break
            here = {t for t in child.seqs if t in avail}
            if not here and prune:
                break
            depth += 1
            node = child
            if here:
                best = here
                best_depth = depth
        load = outstanding or {}
        target = min(best, key=lambda t: (load.get(t, 0), t))
        return MatchResult(target, best_depth, best_depth / len(tokens))

    def rebuild_for_targets(self, targets: Iterable[str]) -> None:
        """Drop every record whose target is not in ``targets``.

        Used when replica ownership changes; surviving records keep their
        sequence numbers and relative age.
        """
        keep = set(targets)
        survivors = [(p, t, s) for (p, t), s in self._records.items() if t in keep]
        self._root = _Node()
        self._size = 0
        self._records = {}
        for path, target, seq in survivors:
            self._records[(path, target)] = seq
            node = self._root
            node.seqs.setdefault(target, set()).add(seq)
            for tok in path:
                child = node.children.get(tok)
                if child is None:
                    child = _Node()
                    node.children[tok] = child
                    self._size += 1
                child.seqs.setdefault(target, set()).add(seq)
                node = child

    def dump(self) -> list[str]:
        """Depth-first `path -> {target:last_seq,...}` lines for golden tests."""
        lines: list[str] = []
        stack: list[tuple[_Node, tuple[int, ...]]] = [(self._root, ())]
        while stack:
            node, path = stack.pop()
            if path:
                annot = ",".join(f"{t}:{max(node.seqs[t])}" for t in sorted(node.seqs))
                lines.append(f"{','.join(map(str, path))} -> {{{annot}}}")
            for tok in sorted(node.children, reverse=True):
                stack.append((node.children[tok], path + (tok,)))
        return lines

    def check_invariants(self) -> None:
        """Subset property and exact size accounting, by full walk."""
        count = 0
        stack: list[_Node] = [self._root]
        while stack:
            node = stack.pop()
            for tok, child in node.children.items():
                count += 1
                for target, seqs in child.seqs.items():
                    parent_seqs = node.seqs.get(target)
                    if parent_seqs is None or not seqs <= parent_seqs:
                        raise AssertionError(
                            f"subset property violated at token {tok} target {target}"
                        )
                if not child.seqs:
                    raise AssertionError(f"empty node retained at token {tok}")
                stack.append(child)
        if count != self._size:
            raise AssertionError(f"size accounting off: walked {count}, tracked {self._size}")
        if self._size > self.max_size and self._records:
            raise AssertionError("size exceeds budget after operation")

    def __iter__(self) -> Iterator[tuple[TokenSeq, str, int]]:
        return iter(self.records())
