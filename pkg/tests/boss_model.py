"""Random pipeline driver for the BOSS unit, checking its invariants as it goes.

A case is a run of generations. Each generation commits some outcome
writes (possibly fewer than the loop runs, possibly more when the loop
exits early), then fetches the target branch ``t`` times and the End pc
once. Fetch runs ahead of commit inside a bounded window, wrong-path
bursts are fetched and squashed, and sometimes the correct-path tail is
flushed and refetched.

Checked on every step:
  * a correct-path hit returns exactly the outcome committed for that
    generation and iteration (so no hit crosses generations and stale
    early-exit entries are never consumed);
  * any hit reads an entry whose generation bit equals the consumer's;
  * squashing fetches in reverse order restores the consumer state, and
    the whole ChannelState when nothing committed in between.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from boss_sim.boss import BossUnit

T_PC, E_PC, OTHER_PC = 40, 48, 7


@dataclass
class Violations:
    cross_gen: int = 0
    wrong_value: int = 0
    squash_mismatch: int = 0
    full_state_mismatch: int = 0
    hits: int = 0
    cases: int = 0
    notes: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.cross_gen + self.wrong_value + self.squash_mismatch + self.full_state_mismatch

    def note(self, msg):
        if len(self.notes) < 5:
            self.notes.append(msg)


def _stream(rng: random.Random, gens: int, max_trip: int):
    """Correct-path event list and the outcome table it produces."""
    events, outcomes = [], {}
    for g in range(gens):
        w = rng.randint(0, max_trip)
        t = rng.randint(0, max_trip)
        for s in range(w):
            bit = rng.random() < 0.5
            outcomes[(g, s)] = bit
            events.append(("W", g, s, bit))
        events += [("T", g, i) for i in range(t)]
        events.append(("E", g))
    return events, outcomes


def run_case(rng: random.Random, v: Violations, iterations: int = 256) -> None:
    max_trip = rng.choice((2, 4, 8, min(16, iterations)))
    events, outcomes = _stream(rng, rng.randint(1, 6), max_trip)
    unit = BossUnit(1, iterations, record=False)
    unit.open_channel(0, [T_PC], E_PC)
    ch = unit.channels[0]
    window = rng.randint(1, 12)
    inflight = []          # (event, consumer snapshot taken before its fetch)
    committed = set()
    nxt = 0

    def consumer():
        return (ch.citer, ch.cgen)

    def full():
        return (bytes(ch.valid), bytes(ch.taken), bytes(ch.gen), ch.pgen, ch.cgen, ch.citer,
                ch.commit_iter, tuple(ch.stack), ch.lost, ch.targets, ch.end_pc, ch.open)

    def fetch(ev, correct):
        snap = consumer()
        if ev[0] == "T":
            i, gbit = ch.citer, ch.cgen
            entry_gen = ch.gen[i]
            hit = unit.consume_prediction(T_PC)
            if hit is not None:
                v.hits += 1
                if entry_gen != gbit:
                    v.cross_gen += 1
                    v.note(f"hit on entry gen {entry_gen} with consumer gen {gbit}")
                if correct:
                    key = (ev[1], ev[2])
                    if key not in committed or outcomes[key] != hit:
                        v.wrong_value += 1
                        v.note(f"hit {hit} for gen {ev[1]} iter {ev[2]}; committed={key in committed}")
        elif ev[0] == "E":
            unit.notify_end_fetch(E_PC)
        return snap

    def squash(entries):
        recs = [("branch", T_PC) if e[0] == "T" else ("end", E_PC) for e, _ in reversed(entries) if e[0] in "TE"]
        unit.notify_squash(recs)

    steps = 0
    while (nxt < len(events) or inflight) and steps < 2000:
        steps += 1
        r = rng.random()
        if r < 0.45 and nxt < len(events) and len(inflight) < window:
            ev = events[nxt]
            inflight.append((ev, fetch(ev, True)))
            nxt += 1
        elif r < 0.75 and inflight:
            ev, _ = inflight.pop(0)
            if ev[0] == "W":
                unit.write_outcome(0, ev[2], ev[3])
                committed.add((ev[1], ev[2]))
            elif ev[0] == "T":
                unit.notify_commit(T_PC)
            else:
                unit.notify_commit(E_PC)
        elif r < 0.9:
            before_full = full()
            before = consumer()
            burst = []
            for _ in range(rng.randint(1, 6)):
                ev = rng.choice((("T", -1, -1), ("T", -1, -1), ("E", -1), ("X",)))
                burst.append((ev, fetch(ev, False)))
            squash(burst)
            if consumer() != before:
                v.squash_mismatch += 1
                v.note("wrong-path burst not undone")
            if full() != before_full:
                v.full_state_mismatch += 1
                v.note("full channel state differs after fetch + squash")
        elif inflight:
            k = rng.randint(1, len(inflight))
            tail = inflight[-k:]
            del inflight[-k:]
            squash(tail)
            if consumer() != tail[0][1]:
                v.squash_mismatch += 1
                v.note("flush did not restore the consumer snapshot")
            nxt -= sum(1 for _ in tail)
    v.cases += 1


def run_cases(n: int, seed: int = 0, iterations: int = 256) -> Violations:
    rng = random.Random(seed)
    v = Violations()
    for _ in range(n):
        run_case(rng, v, iterations if rng.random() < 0.7 else 16)
    return v
