"""Cycle-stepped speculative frontend: fetch, in-order branch resolve, in-order commit.

The correct path is produced by stepping an architectural :class:`Machine`
as instructions are fetched; after a mispredicted branch a forked machine
follows predictor outputs down the wrong path until the branch resolves.
Only correct-path instructions ever commit, so BOSS stores on the wrong
path have no effect. Each cycle runs resolve, then commit, then fetch.
"""
from __future__ import annotations

import io
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

from .boss import BossEvent, BossUnit
from .cache import CacheConfig, CacheHierarchy
from .ir import Config, Outcome, Program, mmio_decode
from .oracle import (BOSS_CONFIG, BOSS_OUTCOME, BRANCH, LOAD, STORE, Machine,
                     MemoryFault)
from .predictors import Predictor, make_predictor

log = logging.getLogger(__name__)

INF = float("inf")
DATAFLOW_WINDOW = 4


@dataclass(frozen=True)
class CoreConfig:
    width: int = 8
    window: int = 192
    resolve_delay: int = 6
    refill_penalty: int = 12
    cache: CacheConfig = CacheConfig()
    boss_enabled: bool = True
    boss_channels: int = 4
    wrong_path_pollution: bool = False
    max_cycles: int = 50_000_000
    step_limit: int = 10_000_000
    debug: bool = False

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.window < self.width:
            raise ValueError("window must be >= width")
        if self.resolve_delay < 0 or self.refill_penalty < 0:
            raise ValueError("delays must be non-negative")


@dataclass
class SimStats:
    cycles: int = 0
    committed: int = 0
    branches: int = 0
    mispredicts: int = 0
    target_mispredicts: int = 0
    target_instances: int = 0
    boss_hits: int = 0
    boss_misses: int = 0
    path_hits: int = 0          # correct-path hits
    wrong_hints: int = 0        # correct-path hits whose outcome was wrong
    squashes: int = 0
    wrong_path_fetched: int = 0
    snapshot_mismatches: int = 0
    terminated: bool = True
    per_pc_mispredicts: dict = field(default_factory=dict)
    # (pc, iteration) -> [mispredicts, instances]
    histogram: dict = field(default_factory=dict)

    @property
    def mpki(self) -> float:
        return self.mispredicts * 1000.0 / self.committed if self.committed else 0.0

    @property
    def ipc(self) -> float:
        return self.committed / self.cycles if self.cycles else 0.0

    @property
    def target_mispredict_rate(self) -> float:
        return self.target_mispredicts / self.target_instances if self.target_instances else 0.0

    def pc_mispredicts(self, pc: int) -> int:
        return sum(m for (p, _), (m, _) in self.histogram.items() if p == pc)

    def pc_instances(self, pc: int) -> int:
        return sum(n for (p, _), (_, n) in self.histogram.items() if p == pc)

    def as_record(self) -> dict:
        """Flat scalar fields plus the derived metrics."""
        rec = {k: v for k, v in asdict(self).items() if not isinstance(v, dict)}
        rec["mpki"] = self.mpki
        rec["ipc"] = self.ipc
        rec["target_mispredict_rate"] = self.target_mispredict_rate
        return rec

    def key_values(self) -> str:
        out = []
        for k, v in self.as_record().items():
            if isinstance(v, float):
                v = f"{v:.6f}"
            elif isinstance(v, bool):
                v = int(v)
            out.append(f"{k}={v}")
        return "\n".join(out) + "\n"

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        buf.write("pc,iter,mispredicts,instances\n")
        for (pc, it), (m, n) in sorted(self.histogram.items()):
            buf.write(f"{pc},{it},{m},{n}\n")
        return buf.getvalue()


class _Entry:
    __slots__ = ("pc", "correct", "ready", "ev", "tags", "epoch", "pred", "actual",
                 "resolve_at", "iteration", "snapshot")

    def __init__(self, pc, correct, ready, ev=None):
        self.pc = pc
        self.correct = correct
        self.ready = ready
        self.ev = ev
        self.tags = None
        self.epoch = 0
        self.pred = None
        self.actual = None
        self.resolve_at = None
        self.iteration = None
        self.snapshot = None


@dataclass
class SimResult:
    stats: SimStats
    log: list[BossEvent]
    commits: Optional[list[int]] = None
    boss: Optional[BossUnit] = None
    regs: tuple = ()
    memory: tuple = ()


class _Sim:
    def __init__(self, program: Program, predictor: Predictor, core: CoreConfig, record_commits: bool):
        self.p = program
        self.bpu = predictor
        self.core = core
        self.cache = CacheHierarchy(core.cache)
        self.unit = BossUnit(core.boss_channels) if core.boss_enabled else None
        self.stats = SimStats()
        self.arch = Machine(program)
        self.wp: Optional[Machine] = None      # wrong-path machine while speculating
        self.wp_stalled = False
        self.rob: deque[_Entry] = deque()
        self.pending: deque[_Entry] = deque()  # correct-path cond branches awaiting resolve
        self.now = 0
        self.fetch_resume = 0
        self.last_resolve = 0
        self.load_lat: dict[int, int] = {}
        self.recent: deque = deque(maxlen=DATAFLOW_WINDOW)
        self.commits = [] if record_commits else None
        self.fetched_correct = 0
        self.fault = False
        # per-target iteration counters, reset when the target's End pc is fetched
        self.targets = dict(program.targets)
        self.end_to_targets: dict[int, list[int]] = {}
        for t, e in self.targets.items():
            if e is not None:
                self.end_to_targets.setdefault(e, []).append(t)
        self.iter_count = {t: 0 for t in self.targets}

    # ---------------------------------------------------------------- fetch
    def _boss_fetch(self, entry: _Entry, pc: int, is_cond: bool) -> Optional[bool]:
        """BOSS-side effects of fetching ``pc``; returns the hint, if any."""
        unit = self.unit
        if unit is None or not unit.enabled:
            return None
        hint = None
        tags = None
        if is_cond and unit.is_target(pc):
            hint = unit.consume_prediction(pc)
            if hint is None:
                self.stats.boss_misses += 1
            else:
                self.stats.boss_hits += 1
            tags = [("branch", pc)]
        if unit.is_end(pc):
            unit.notify_end_fetch(pc)
            tags = (tags or []) + [("end", pc)]
        if tags:
            entry.tags = tags
            entry.epoch = unit.epoch
        return hint

    def _consumer_snapshot(self):
        # End commits may retire stack frames in the meantime, so only the consumer pair is compared
        return tuple((c.citer, c.cgen) for c in self.unit.channels)

    def _resolve_latency(self, pc: int, ins) -> int:
        loads = self.p.slice_loads.get(pc)
        if loads is not None:
            return sum(self.load_lat.get(lpc, 0) for lpc in loads)
        need = set(ins.reads())
        total = 0
        for rins, lat in reversed(self.recent):
            if rins.dst is not None and rins.dst in need:
                need.discard(rins.dst)
                need.update(rins.reads())
                total += lat
        return total

    def _fetch_correct(self) -> bool:
        """Fetch one correct-path instruction. False if fetch must stop this cycle."""
        m = self.arch
        if m.halted or m.pc >= len(self.p):
            return False
        pc = m.pc
        ins = self.p.instructions[pc]
        try:
            ev = m.step()
        except MemoryFault:
            self.fault = True
            return False
        if ev is None:
            return False
        self.fetched_correct += 1
        now = self.now
        entry = _Entry(pc, True, now + 1, ev)
        lat = 0
        if ev.kind == LOAD and not self.p.mmio.contains(ev.addr):
            lat = self.cache.access(ev.addr, "D")
            self.load_lat[pc] = lat
            entry.ready = now + lat
        elif ev.kind == STORE:
            self.cache.access(ev.addr, "D")
        if ins.op in ("BNZ", "BZ"):
            hint = self._boss_fetch(entry, pc, True)
            pred = hint if hint is not None else self.bpu.predict(pc)
            entry.pred, entry.actual = pred, ev.outcome
            if hint is not None:
                self.stats.path_hits += 1
                if hint != ev.outcome:
                    self.stats.wrong_hints += 1
            if pc in self.targets:
                entry.iteration = self.iter_count[pc]
                self.iter_count[pc] += 1
            if self.core.debug and self.unit is not None:
                entry.snapshot = (self.unit.epoch, self._consumer_snapshot())
            resolve = now + self.core.resolve_delay + self._resolve_latency(pc, ins)
            entry.resolve_at = max(resolve, self.last_resolve)
            self.last_resolve = entry.resolve_at
            entry.ready = INF
            self.pending.append(entry)
        else:
            self._boss_fetch(entry, pc, False)
        for t in self.end_to_targets.get(pc, ()):
            self.iter_count[t] = 0
        self.recent.append((ins, lat))
        self.rob.append(entry)
        if ins.op in ("BNZ", "BZ"):
            if entry.pred != entry.actual:
                self.wp = m.fork()
                self.wp.pc = self.p.dest(pc) if entry.pred else pc + 1
                self.wp_stalled = False
                return False
            return not entry.pred
        if ins.op == "JMP" or ins.op == "HALT":
            return False
        return True

    def _fetch_wrong(self) -> bool:
        m = self.wp
        if self.wp_stalled or m.halted or not 0 <= m.pc < len(self.p):
            self.wp_stalled = True
            return False
        pc = m.pc
        ins = self.p.instructions[pc]
        entry = _Entry(pc, False, INF)
        self.stats.wrong_path_fetched += 1
        if ins.op in ("BNZ", "BZ"):
            hint = self._boss_fetch(entry, pc, True)
            pred = hint if hint is not None else self.bpu.predict(pc)
            m.pc = self.p.dest(pc) if pred else pc + 1
            self.rob.append(entry)
            return not pred
        self._boss_fetch(entry, pc, False)
        self.rob.append(entry)
        if ins.op == "JMP":
            m.pc = self.p.dest(pc)
            return False
        if ins.op == "HALT":
            self.wp_stalled = True
            return False
        try:
            ev = m.step()
        except MemoryFault:
            self.wp_stalled = True
            return False
        if self.core.wrong_path_pollution and ev is not None and ev.kind in (LOAD, STORE) \
                and not self.p.mmio.contains(ev.addr):
            self.cache.access(ev.addr, "D")
        return True

    def fetch(self) -> int:
        if self.now < self.fetch_resume:
            return 0
        n = 0
        while n < self.core.width and len(self.rob) < self.core.window:
            if self.wp is not None:
                if self.wp_stalled:
                    break
                more = self._fetch_wrong()
            else:
                if self.arch.halted or self.fault:
                    break
                before = len(self.rob)
                more = self._fetch_correct()
                if len(self.rob) == before:
                    break
            n += 1
            if not more:
                break
        return n

    # -------------------------------------------------------------- resolve
    def resolve(self) -> int:
        done = 0
        while self.pending and self.pending[0].resolve_at <= self.now:
            e = self.pending.popleft()
            done += 1
            e.ready = self.now
            taken = e.actual
            self.bpu.update(e.pc, taken)
            st = self.stats
            st.branches += 1
            wrong = e.pred != taken
            if e.iteration is not None:
                st.target_instances += 1
                cell = st.histogram.setdefault((e.pc, e.iteration), [0, 0])
                cell[1] += 1
                if wrong:
                    st.target_mispredicts += 1
                    cell[0] += 1
            if wrong:
                st.mispredicts += 1
                st.per_pc_mispredicts[e.pc] = st.per_pc_mispredicts.get(e.pc, 0) + 1
                self._squash_after(e)
        return done

    def _squash_after(self, e: _Entry) -> None:
        st = self.stats
        st.squashes += 1
        tags = []
        unit = self.unit
        while self.rob and self.rob[-1] is not e:
            y = self.rob.pop()
            if y.tags and unit is not None and y.epoch == unit.epoch:
                tags.extend(reversed(y.tags))
        if unit is not None and tags:
            unit.now = self.now
            unit.notify_squash(tags)
        if e.snapshot is not None and unit is not None and e.snapshot[0] == unit.epoch:
            if self._consumer_snapshot() != e.snapshot[1]:
                st.snapshot_mismatches += 1
                log.error("cycle %d: BOSS state after squash differs from fetch-time snapshot", self.now)
        self.wp = None
        self.wp_stalled = False
        self.fetch_resume = self.now + self.core.refill_penalty

    # --------------------------------------------------------------- commit
    def commit(self) -> int:
        n = 0
        unit = self.unit
        while n < self.core.width and self.rob and self.rob[0].ready <= self.now:
            e = self.rob.popleft()
            n += 1
            self.stats.committed += 1
            if self.commits is not None:
                self.commits.append(e.pc)
            if unit is not None:
                unit.now = self.now
                ev = e.ev
                if ev.kind == BOSS_CONFIG:
                    unit.config_write(mmio_decode(ev.addr, self.p.mmio).channel, ev.value)
                elif ev.kind == BOSS_OUTCOME:
                    where = mmio_decode(ev.addr, self.p.mmio)
                    values = ev.value if isinstance(ev.value, tuple) else (ev.value,)
                    for i, v in enumerate(values):
                        unit.write_outcome(where.channel, where.slot + i, v != 0)
                unit.notify_commit(e.pc)
        return n

    # ----------------------------------------------------------------- loop
    def _next_event(self) -> float:
        t = INF
        if self.pending:
            t = min(t, self.pending[0].resolve_at)
        if self.rob and self.rob[0].ready != INF:
            t = min(t, self.rob[0].ready)
        if self.fetch_resume > self.now:
            t = min(t, self.fetch_resume)
        return t

    def _can_fetch(self) -> bool:
        if len(self.rob) >= self.core.window:
            return False
        if self.wp is not None:
            return not self.wp_stalled
        return not (self.arch.halted or self.fault or self.arch.pc >= len(self.p))

    def run(self) -> SimStats:
        core = self.core
        while True:
            if self.arch.halted and not self.rob:
                break
            if not self.rob and (self.fault or self.arch.pc >= len(self.p)):
                break
            if self.now >= core.max_cycles or self.fetched_correct > core.step_limit:
                self.stats.terminated = False
                break
            progress = self.resolve() + self.commit() + self.fetch()
            if progress or (self._can_fetch() and self.now >= self.fetch_resume):
                self.now += 1
                continue
            nxt = self._next_event()
            if nxt == INF:
                # nothing can ever happen again
                self.stats.terminated = False
                break
            self.now = max(self.now + 1, int(nxt))
        self.stats.cycles = max(self.now, 1)
        if self.fault:
            self.stats.terminated = False
        return self.stats


def run_sim(program: Program, predictor: Optional[Predictor] = None, core: CoreConfig = CoreConfig(),
            record_commits: bool = False) -> SimResult:
    """Simulate ``program``; returns stats, the BOSS event log and optionally committed pcs."""
    predictor = predictor if predictor is not None else make_predictor("tage")
    sim = _Sim(program, predictor, core, record_commits)
    stats = sim.run()
    return SimResult(stats, sim.unit.log if sim.unit else [], sim.commits, sim.unit,
                     tuple(sim.arch.regs), sim.arch.mem.image())
