"""Two-level set-associative LRU cache latency model (L1I/L1D, shared L2, memory)."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass


@dataclass(frozen=True)
class CacheLevel:
    size: int
    ways: int
    latency: int
    line: int = 64

    def __post_init__(self):
        if self.size <= 0 or self.ways <= 0 or self.line <= 0:
            raise ValueError("cache geometry must be positive")
        if self.size % (self.ways * self.line):
            raise ValueError("size must be a multiple of ways * line")

    @property
    def sets(self) -> int:
        return self.size // (self.ways * self.line)


@dataclass(frozen=True)
class CacheConfig:
    l1i: CacheLevel = CacheLevel(32 * 1024, 2, 2)
    l1d: CacheLevel = CacheLevel(64 * 1024, 4, 2)
    l2: CacheLevel = CacheLevel(2 * 1024 * 1024, 8, 20)
    memory_latency: int = 150


class SetAssoc:
    def __init__(self, level: CacheLevel):
        self.level = level
        self.sets = [OrderedDict() for _ in range(level.sets)]

    def probe(self, line_addr: int) -> bool:
        """Look up a line, refreshing LRU on a hit."""
        s = self.sets[line_addr % len(self.sets)]
        if line_addr in s:
            s.move_to_end(line_addr)
            return True
        return False

    def fill(self, line_addr: int) -> None:
        s = self.sets[line_addr % len(self.sets)]
        s[line_addr] = True
        s.move_to_end(line_addr)
        if len(s) > self.level.ways:
            s.popitem(last=False)


class CacheHierarchy:
    def __init__(self, config: CacheConfig = CacheConfig()):
        self.config = config
        self.l1 = {"I": SetAssoc(config.l1i), "D": SetAssoc(config.l1d)}
        self.l2 = SetAssoc(config.l2)
        self.accesses = {"I": 0, "D": 0}
        self.l1_misses = {"I": 0, "D": 0}
        self.l2_misses = 0

    def access(self, addr: int, kind: str = "D") -> int:
        """Latency in cycles of one access; fills every level on the way back."""
        l1 = self.l1[kind]
        line = addr // l1.level.line
        self.accesses[kind] += 1
        lat = l1.level.latency
        if l1.probe(line):
            return lat
        self.l1_misses[kind] += 1
        lat += self.config.l2.latency
        l2_line = addr // self.config.l2.line
        if not self.l2.probe(l2_line):
            self.l2_misses += 1
            lat += self.config.memory_latency
            self.l2.fill(l2_line)
        l1.fill(line)
        return lat


def cache_access(cache: CacheHierarchy, addr: int, kind: str = "D") -> int:
    return cache.access(addr, kind)
