import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boss_sim.cache import CacheConfig, CacheHierarchy, CacheLevel, SetAssoc


def test_latencies_cold_then_warm():
    c = CacheHierarchy()
    assert c.access(0x1000) == 2 + 20 + 150
    assert c.access(0x1008) == 2                 # same 64 B line
    assert c.access(0x1000, "I") == 2 + 20       # L2 already holds it


def test_l1_eviction_falls_back_to_l2():
    cfg = CacheConfig(l1d=CacheLevel(2 * 64, 2, 2))   # one set, two ways
    c = CacheHierarchy(cfg)
    for a in (0, 64, 128):
        c.access(a)
    assert c.access(0) == 22
    assert c.access(128) == 2


def test_geometry_validation():
    with pytest.raises(ValueError):
        CacheLevel(1000, 4, 2)
    with pytest.raises(ValueError):
        CacheLevel(0, 4, 2)


class ListLRU:
    """Reference LRU: one Python list per set, most recent last."""

    def __init__(self, sets, ways):
        self.sets = [[] for _ in range(sets)]
        self.ways = ways

    def access(self, line):
        s = self.sets[line % len(self.sets)]
        hit = line in s
        if hit:
            s.remove(line)
        s.append(line)
        if len(s) > self.ways:
            s.pop(0)
        return hit


@given(st.integers(0, 2**32 - 1), st.sampled_from([(1, 1), (2, 2), (4, 4), (8, 2)]))
@settings(max_examples=100)
def test_set_assoc_matches_reference(seed, geom):
    sets, ways = geom
    sa = SetAssoc(CacheLevel(sets * ways * 64, ways, 1))
    ref = ListLRU(sets, ways)
    rng = random.Random(seed)
    for _ in range(300):
        line = rng.randrange(3 * sets * ways)
        hit = sa.probe(line)
        if not hit:
            sa.fill(line)
        assert hit == ref.access(line)


def test_miss_counters():
    c = CacheHierarchy()
    for a in range(0, 64 * 10, 64):
        c.access(a)
    c.access(0)
    assert c.accesses["D"] == 11 and c.l1_misses["D"] == 10 and c.l2_misses == 10
