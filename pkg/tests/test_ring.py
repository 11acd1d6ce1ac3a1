import random

import pytest

from crosslb.hashing import hash64
from crosslb.ring import HashRing, NoAvailableTarget


def oracle_lookup(ring: HashRing, key: str, available: set[str]) -> str:
    """Brute force: sort all entries, walk clockwise from hash(key)."""
    point = hash64(key, ring.seed)
    ordered = sorted(ring.entries)
    rotated = [e for e in ordered if e[0] >= point] + [e for e in ordered if e[0] < point]
    for _, target in rotated:
        if target in available:
            return target
    raise NoAvailableTarget(key)


def test_single_target_always_wins():
    ring = HashRing.build({"only"}, vnodes_per_target=8, seed=1)
    for i in range(50):
        assert ring.lookup(f"k{i}", {"only"}) == "only"


def test_build_is_deterministic():
    a = HashRing.build({"x", "y", "z"}, 50, seed=9)
    b = HashRing.build({"z", "y", "x"}, 50, seed=9)
    assert a.entries == b.entries


def test_build_rejects_bad_inputs():
    with pytest.raises(ValueError):
        HashRing.build(set(), 10, seed=0)
    with pytest.raises(ValueError):
        HashRing.build({"a"}, 0, seed=0)


def test_balanced_distribution_three_targets():
    ring = HashRing.build({"t0", "t1", "t2"}, vnodes_per_target=100, seed=4)
    counts = {"t0": 0, "t1": 0, "t2": 0}
    for i in range(10_000):
        counts[ring.lookup(f"key-{i}", counts.keys())] += 1
    for share in counts.values():
        assert 10_000 / 3 * 0.5 <= share <= 10_000 / 3 * 2.0


def test_lookup_same_key_stable():
    ring = HashRing.build({"a", "b", "c"}, 100, seed=0)
    avail = {"a", "c"}
    first = ring.lookup("sticky", avail)
    for _ in range(10):
        assert ring.lookup("sticky", avail) == first


def test_unavailable_successor_skipped_to_next_clockwise():
    ring = HashRing.build({"a", "b", "c"}, 40, seed=2)
    for i in range(200):
        key = f"k{i}"
        full = ring.lookup(key, {"a", "b", "c"})
        without = {"a", "b", "c"} - {full}
        assert ring.lookup(key, without) == oracle_lookup(ring, key, without)


def test_empty_availability_errors():
    ring = HashRing.build({"a", "b"}, 10, seed=0)
    with pytest.raises(NoAvailableTarget):
        ring.lookup("k", set())


def test_unknown_available_target_rejected():
    ring = HashRing.build({"a"}, 10, seed=0)
    with pytest.raises(ValueError):
        ring.lookup("k", {"a", "ghost"})


def test_lookup_matches_oracle_randomized():
    rng = random.Random(71)
    for trial in range(40):
        n = rng.randint(1, 16)
        targets = {f"t{i}" for i in range(n)}
        ring = HashRing.build(targets, rng.choice([1, 3, 25, 100]), seed=trial)
        for _ in range(250):
            key = f"key-{rng.randrange(1 << 30)}"
            k = rng.randint(1, n)
            available = set(rng.sample(sorted(targets), k))
            assert ring.lookup(key, available) == oracle_lookup(ring, key, available)


def test_availability_shrink_consistency():
    # Removing other targets never moves a key whose target stays available.
    rng = random.Random(72)
    targets = {f"t{i}" for i in range(8)}
    ring = HashRing.build(targets, 50, seed=5)
    for i in range(500):
        key = f"k{i}"
        avail = set(targets)
        chosen = ring.lookup(key, avail)
        drop = rng.choice(sorted(avail - {chosen}))
        avail.discard(drop)
        assert ring.lookup(key, avail) == chosen


def test_add_then_remove_round_trip():
    ring = HashRing.build({"a", "b"}, 30, seed=3)
    back = ring.add_target("c").remove_target("c")
    assert back.entries == ring.entries


def test_remove_relocates_only_removed_targets_keys():
    targets = {f"t{i}" for i in range(6)}
    ring = HashRing.build(targets, 60, seed=8)
    smaller = ring.remove_target("t3")
    moved = 0
    for i in range(10_000):
        key = f"key-{i}"
        before = ring.lookup(key, targets)
        after = smaller.lookup(key, targets - {"t3"})
        if before == "t3":
            moved += 1
            assert after != "t3"
        else:
            assert after == before
    assert moved > 0


def test_add_to_single_target_ring_moves_only_to_new():
    ring = HashRing.build({"old"}, 40, seed=6)
    grown = ring.add_target("new")
    for i in range(2000):
        target = grown.lookup(f"k{i}", {"old", "new"})
        assert target in ("old", "new")
    # Every key previously on "old" either stays or moves to "new" only.
    assert any(
        grown.lookup(f"k{i}", {"old", "new"}) == "new" for i in range(2000)
    )


def test_remove_guards():
    ring = HashRing.build({"a"}, 10, seed=0)
    with pytest.raises(ValueError):
        ring.remove_target("a")
    with pytest.raises(ValueError):
        ring.remove_target("ghost")
    with pytest.raises(ValueError):
        ring.add_target("a")


def test_unchanged_targets_keep_their_hash_points():
    ring = HashRing.build({"a", "b", "c"}, 25, seed=1)
    shrunk = ring.remove_target("b")
    kept = {(p, t) for p, t in ring.entries if t != "b"}
    assert set(shrunk.entries) == kept
