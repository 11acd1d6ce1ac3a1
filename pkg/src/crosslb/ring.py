"""Consistent-hash ring with virtual nodes and availability skipping.

Hash points come from the seedable 64-bit hash in :mod:`crosslb.hashing`,
so rings are reproducible across runs and platforms. Rings are immutable
snapshots; add/remove return new rings.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable

from .hashing import hash64


class NoAvailableTarget(LookupError):
    """Raised when a lookup finds no available target (caller queues)."""


@dataclass(frozen=True)
class HashRing:
    """Sorted (hash_point, target_id) entries, vnodes_per_target each."""

    entries: tuple[tuple[int, str], ...]
    targets: frozenset[str]
    vnodes_per_target: int
    seed: int

    @staticmethod
    def build(targets: Iterable[str], vnodes_per_target: int = 100, seed: int = 0) -> "HashRing":
        target_set = frozenset(targets)
        if not target_set:
            raise ValueError("cannot build a ring over an empty target set")
        if vnodes_per_target < 1:
            raise ValueError("vnodes_per_target must be >= 1")
        entries = sorted(
            (hash64(f"{target}#{i}", seed), target)
            for target in target_set
            for i in range(vnodes_per_target)
        )
        return HashRing(
            entries=tuple(entries),
            targets=target_set,
            vnodes_per_target=vnodes_per_target,
            seed=seed,
        )

    def lookup(self, key: str, available: Iterable[str]) -> str:
        """First entry at or clockwise after hash(key) whose target is available.

        Skipping happens at vnode granularity: every entry whose target is
        not in ``available`` is stepped over individually.
        """
        avail = set(available)
        if not avail <= self.targets:
            raise ValueError(f"unknown targets in availability set: {sorted(avail - self.targets)}")
        if not avail:
            raise NoAvailableTarget(key)
        point = hash64(key, self.seed)
        start = bisect.bisect_left(self.entries, point, key=lambda e: e[0])
        n = len(self.entries)
        for offset in range(n):
            target = self.entries[(start + offset) % n][1]
            if target in avail:
                return target
        raise NoAvailableTarget(key)  # unreachable: avail is non-empty subset

    def add_target(self, target: str) -> "HashRing":
        if target in self.targets:
            raise ValueError(f"target {target!r} already on ring")
        return HashRing.build(self.targets | {target}, self.vnodes_per_target, self.seed)

    def remove_target(self, target: str) -> "HashRing":
        if target not in self.targets:
            raise ValueError(f"target {target!r} not on ring")
        if len(self.targets) == 1:
            raise ValueError("cannot remove the last target")
        return HashRing.build(self.targets - {target}, self.vnodes_per_target, self.seed)
