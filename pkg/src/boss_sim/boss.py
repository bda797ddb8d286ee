"""The BOSS frontend unit: per-channel outcome storage and its fetch/squash/commit event machine.

Each channel holds one 256-entry outcome table (valid + taken bit, plus the
1-bit producer generation the entry was written in), the target and End PCs,
producer/consumer generation bits, consumer and commit iteration counters
and the iteration stack used to undo speculative End fetches.

The modeled hardware keeps one stack frame. Frames pushed beyond that are
retained only so squashes can unwind exactly; while any are present the
channel is flagged ``desync`` and lookups never hit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional

from .ir import END_NONE

log = logging.getLogger(__name__)

MAX_TARGETS = 4
STACK_DEPTH = 1


def storage_bytes(channels: int, iterations: int) -> int:
    """Storage needed for ``channels`` channels of ``iterations`` outcome slots."""
    if channels <= 0 or iterations <= 0:
        raise ValueError("channels and iterations must be positive")
    outcome_bits = channels * iterations * 2            # outcome + valid
    pc_bytes = 2 * channels * 8                          # target PC and End PC tables
    iter_bits = 2 * channels * max(1, math.ceil(math.log2(iterations)))
    gen_bits = 2 * channels                              # producer and consumer gen#
    return -(-outcome_bits // 8) + pc_bytes + -(-iter_bits // 8) + -(-gen_bits // 8)


@dataclass(frozen=True)
class ChannelState:
    open: bool
    target_pcs: tuple[int, ...]
    end_pc: Optional[int]
    valid: tuple[int, ...]
    taken: tuple[int, ...]
    entry_gen: tuple[int, ...]
    producer_gen: int
    consumer_gen: int
    consumer_iter: int
    commit_iter: int
    iter_stack: tuple[tuple[int, int], ...]
    desync: bool


class BossEvent(NamedTuple):
    time: int
    kind: str
    ch: int
    gen: int
    iter: int
    detail: object = None

    def line(self) -> str:
        return f"{self.time} {self.kind} {self.ch} {self.gen} {self.iter} {_fmt(self.detail)}"


def _fmt(detail) -> str:
    if detail is None:
        return "-"
    if isinstance(detail, (tuple, list)):
        return ",".join(_fmt(d) for d in detail)
    if isinstance(detail, bool):
        return "T" if detail else "N"
    return str(detail)


# records that drive state; the rest are derived observations
REPLAYED = {"open", "config", "close", "write", "hit", "miss", "end_fetch", "squash_undo", "commit", "end_commit"}


class _Channel:
    __slots__ = ("open", "targets", "end_pc", "valid", "taken", "gen", "pgen", "cgen",
                 "citer", "commit_iter", "stack", "lost", "n")

    def __init__(self, n: int):
        self.n = n
        self.reset((), None)
        self.open = False

    def reset(self, targets, end_pc):
        n = self.n
        self.open = True
        self.targets = tuple(targets)
        self.end_pc = end_pc
        self.valid = bytearray(n)
        self.taken = bytearray(n)
        self.gen = bytearray(n)
        self.pgen = self.cgen = 0
        self.citer = self.commit_iter = 0
        self.stack: list[tuple[int, int]] = []
        self.lost = False

    @property
    def desync(self) -> bool:
        return self.lost or len(self.stack) > STACK_DEPTH


class BossUnit:
    def __init__(self, channels: int = 4, iterations: int = 256, record: bool = True):
        self.channels = [_Channel(iterations) for _ in range(channels)]
        self.iterations = iterations
        self.record = record
        self.log: list[BossEvent] = []
        self.now = 0
        self.epoch = 0          # bumps on every open/close; lets callers drop stale squash records
        self._targets: dict[int, int] = {}
        self._ends: dict[int, list[int]] = {}

    # -- bookkeeping --------------------------------------------------------
    def _emit(self, kind, ch, detail=None):
        if self.record:
            c = self.channels[ch]
            self.log.append(BossEvent(self.now, kind, ch, c.cgen, c.citer, detail))

    def _reindex(self):
        self._targets.clear()
        self._ends.clear()
        for i, c in enumerate(self.channels):
            if not c.open:
                continue
            for pc in c.targets:
                self._targets.setdefault(pc, i)
            if c.end_pc is not None:
                self._ends.setdefault(c.end_pc, []).append(i)

    @property
    def enabled(self) -> bool:
        return any(c.open for c in self.channels)

    def is_target(self, pc: int) -> bool:
        return pc in self._targets

    def is_end(self, pc: int) -> bool:
        return pc in self._ends

    def _check(self, ch):
        if not 0 <= ch < len(self.channels):
            raise IndexError(f"channel {ch} out of range (unit has {len(self.channels)})")

    # -- configuration ------------------------------------------------------
    def open_channel(self, ch: int, targets: Iterable[int], end_pc: Optional[int]) -> None:
        self._check(ch)
        targets = list(dict.fromkeys(targets))
        if len(targets) > MAX_TARGETS:
            log.warning("channel %d: %d target PCs, keeping the first %d", ch, len(targets), MAX_TARGETS)
            targets = targets[:MAX_TARGETS]
        self.channels[ch].reset(targets, end_pc)
        self.epoch += 1
        self._reindex()
        self._emit("open", ch, (tuple(targets), end_pc))

    def config_write(self, ch: int, value: int) -> None:
        """Commit of a store to a channel's config word.

        ``-1`` closes the channel. A store naming the currently open End PC
        and a new target adds that target; anything else (re)opens the channel.
        """
        self._check(ch)
        if value == -1:
            self.close_channel(ch)
            return
        value &= 0xFFFFFFFFFFFFFFFF
        target, end = value & 0xFFFFFFFF, value >> 32
        end_pc = None if end == END_NONE else end
        c = self.channels[ch]
        if c.open and c.end_pc == end_pc and target not in c.targets:
            if len(c.targets) >= MAX_TARGETS:
                log.warning("channel %d already feeds %d targets; ignoring pc %d", ch, MAX_TARGETS, target)
            else:
                c.targets += (target,)
                self._reindex()
            self._emit("config", ch, (target, end_pc))
            return
        self.open_channel(ch, [target], end_pc)

    def close_channel(self, ch: int) -> None:
        self._check(ch)
        c = self.channels[ch]
        if not c.open:
            return
        c.open = False
        self.epoch += 1
        self._reindex()
        self._emit("close", ch)

    def read_state(self, ch: int) -> ChannelState:
        self._check(ch)
        c = self.channels[ch]
        return ChannelState(c.open, c.targets, c.end_pc, tuple(c.valid), tuple(c.taken), tuple(c.gen),
                            c.pgen, c.cgen, c.citer, c.commit_iter, tuple(c.stack), c.desync)

    # -- producer side ------------------------------------------------------
    def write_outcome(self, ch: int, slot: int, taken: bool) -> None:
        self._check(ch)
        c = self.channels[ch]
        if not c.open:
            self._emit("write_ignored", ch, (slot, bool(taken)))
            return
        s = slot % c.n
        c.valid[s] = 1
        c.taken[s] = 1 if taken else 0
        c.gen[s] = c.pgen
        self._emit("write", ch, (s, bool(taken)))

    # -- consumer side ------------------------------------------------------
    def consume_prediction(self, pc: int) -> Optional[bool]:
        """Fetch of a conditional branch: the stored outcome on a hit, else None."""
        ch = self._targets.get(pc)
        if ch is None:
            return None
        c = self.channels[ch]
        i = c.citer
        hit = None
        if not c.desync and c.valid[i] and c.gen[i] == c.cgen:
            hit = bool(c.taken[i])
        if self.record:
            self.log.append(BossEvent(self.now, "hit" if hit is not None else "miss", ch, c.cgen, i,
                                      (pc, hit, c.gen[i]) if hit is not None else (pc,)))
        c.citer = (i + 1) % c.n
        return hit

    def notify_end_fetch(self, pc: int) -> None:
        for ch in self._ends.get(pc, ()):
            c = self.channels[ch]
            c.stack.append((c.citer, c.cgen))
            c.citer = 0
            c.cgen ^= 1
            self._emit("end_fetch", ch, pc)
            if len(c.stack) > STACK_DEPTH:
                self._emit("desync", ch, len(c.stack))

    def notify_squash(self, events: Iterable[tuple[str, int]]) -> None:
        """Undo fetch effects; ``events`` are ``(kind, pc)`` in reverse fetch order."""
        for kind, pc in events:
            if kind == "branch":
                ch = self._targets.get(pc)
                if ch is None:
                    continue
                c = self.channels[ch]
                c.citer = (c.citer - 1) % c.n
                self._emit("squash_undo", ch, ("branch", pc))
            elif kind == "end":
                for ch in self._ends.get(pc, ()):
                    c = self.channels[ch]
                    if c.stack:
                        c.citer, c.cgen = c.stack.pop()
                    else:
                        c.lost = True
                        log.debug("channel %d: squash of End with empty stack", ch)
                    self._emit("squash_undo", ch, ("end", pc))
            else:
                raise ValueError(f"unknown squash record {kind!r}")

    def notify_commit(self, pc: int) -> None:
        ch = self._targets.get(pc)
        if ch is not None:
            c = self.channels[ch]
            i = c.commit_iter
            if c.valid[i] and c.gen[i] == c.pgen:
                c.valid[i] = 0
            c.commit_iter = (i + 1) % c.n
            self._emit("commit", ch, pc)
        for ch in self._ends.get(pc, ()):
            c = self.channels[ch]
            stale = c.pgen
            dropped = 0
            for s in range(c.n):
                if c.valid[s] and c.gen[s] == stale:
                    c.valid[s] = 0
                    dropped += 1
            c.pgen ^= 1
            c.commit_iter = 0
            if c.stack:
                c.stack.pop(0)
            c.lost = False
            self._emit("end_commit", ch, pc)
            self._emit("gen_advance", ch, c.pgen)
            if dropped:
                self._emit("discard", ch, dropped)

    # -- observability ------------------------------------------------------
    def dump_log(self) -> str:
        return "".join(e.line() + "\n" for e in self.log)


def replay(events: Iterable[BossEvent], channels: int = 4, iterations: int = 256) -> BossUnit:
    """Rebuild a unit by re-applying the state-driving records of a log."""
    unit = BossUnit(channels, iterations)
    for e in events:
        if e.kind not in REPLAYED:
            continue
        unit.now = e.time
        if e.kind == "open":
            targets, end = e.detail
            unit.open_channel(e.ch, targets, end)
        elif e.kind == "config":
            target, end = e.detail
            unit.config_write(e.ch, ((END_NONE if end is None else end) << 32) | target)
        elif e.kind == "close":
            unit.close_channel(e.ch)
        elif e.kind == "write":
            unit.write_outcome(e.ch, *e.detail)
        elif e.kind in ("hit", "miss"):
            unit.consume_prediction(e.detail[0])
        elif e.kind == "end_fetch":
            unit.notify_end_fetch(e.detail)
        elif e.kind == "squash_undo":
            unit.notify_squash([e.detail])
        elif e.kind in ("commit", "end_commit"):
            unit.notify_commit(e.detail)
    return unit
