"""Architectural interpreter producing the ground-truth dynamic trace."""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .ir import (WORD, Config, Instruction, MmioLayout, Outcome, Program,
                 ReservedAddress, mmio_decode, wrap64)

DEFAULT_STEP_LIMIT = 10_000_000
MASK64 = 0xFFFFFFFFFFFFFFFF

BRANCH, LOAD, STORE = "branch", "load", "store"
BOSS_CONFIG, BOSS_OUTCOME, OTHER = "boss_config_store", "boss_outcome_store", "other"


class MemoryFault(Exception):
    def __init__(self, addr: int, size: int = 1):
        self.addr = addr
        super().__init__(f"access to {addr:#x} (+{size}) outside the memory image")


class Memory:
    """Byte-addressed memory made of the program's declared segments."""

    def __init__(self, segments=()):
        segments = sorted(segments, key=lambda s: s[0])
        self.starts = [a for a, _ in segments]
        self.segs = [bytearray(d) for _, d in segments]

    def _locate(self, addr: int, n: int):
        i = bisect_right(self.starts, addr) - 1
        if i < 0:
            raise MemoryFault(addr, n)
        off = addr - self.starts[i]
        seg = self.segs[i]
        if off + n > len(seg):
            raise MemoryFault(addr, n)
        return seg, off

    def contains(self, addr: int, n: int = 1) -> bool:
        try:
            self._locate(addr, n)
        except MemoryFault:
            return False
        return True

    def read(self, addr: int, n: int) -> bytes:
        seg, off = self._locate(addr, n)
        return bytes(seg[off:off + n])

    def write(self, addr: int, data: bytes) -> None:
        seg, off = self._locate(addr, len(data))
        seg[off:off + len(data)] = data

    def read_word(self, addr: int) -> int:
        return int.from_bytes(self.read(addr, WORD), "little", signed=True)

    def write_word(self, addr: int, value: int) -> None:
        self.write(addr, (value & MASK64).to_bytes(WORD, "little"))

    def fork(self) -> "OverlayMemory":
        return OverlayMemory(self)

    def image(self) -> tuple[tuple[int, bytes], ...]:
        return tuple((a, bytes(s)) for a, s in zip(self.starts, self.segs))


class OverlayMemory(Memory):
    """Copy-on-write view used for wrong-path execution."""

    def __init__(self, parent: Memory):
        self.parent = parent
        self.overlay: dict[int, int] = {}

    def _locate(self, addr, n):
        return self.parent._locate(addr, n)

    def read(self, addr, n):
        base = bytearray(self.parent.read(addr, n))
        if self.overlay:
            for i in range(n):
                b = self.overlay.get(addr + i)
                if b is not None:
                    base[i] = b
        return bytes(base)

    def write(self, addr, data):
        self.parent._locate(addr, len(data))
        for i, b in enumerate(data):
            self.overlay[addr + i] = b

    def image(self):
        raise NotImplementedError("overlay memories are transient")


class DynEvent(NamedTuple):
    seq: int
    pc: int
    kind: str
    addr: Optional[int] = None
    outcome: Optional[bool] = None
    value: object = None


# opcode dispatch codes
_ALU = {"ADD": lambda a, b: a + b, "SUB": lambda a, b: a - b, "MUL": lambda a, b: a * b,
        "AND": lambda a, b: a & b, "OR": lambda a, b: a | b,
        "CMP_EQ": lambda a, b: int(a == b), "CMP_LE": lambda a, b: int(a <= b),
        "CMP_GE": lambda a, b: int(a >= b)}


def exec_data(ins: Instruction, regs: list[int], mem: Memory, mmio: MmioLayout):
    """Apply a non-control instruction. Returns ``(kind, addr, value)``.

    BOSS-range stores are reported but never change ``mem``.
    Raises MemoryFault for accesses outside the image.
    """
    op = ins.op
    fn = _ALU.get(op)
    if fn is not None:
        regs[ins.dst] = wrap64(fn(regs[ins.srcs[0]], regs[ins.srcs[1]]))
        return OTHER, None, None
    if op == "ADDI":
        regs[ins.dst] = wrap64(regs[ins.srcs[0]] + ins.imm)
        return OTHER, None, None
    if op == "MOVI":
        regs[ins.dst] = wrap64(ins.imm)
        return OTHER, None, None
    if op == "MOV":
        regs[ins.dst] = regs[ins.srcs[0]]
        return OTHER, None, None
    if op == "LD":
        addr = regs[ins.srcs[0]] + ins.imm
        regs[ins.dst] = 0 if mmio.contains(addr) else mem.read_word(addr)
        return LOAD, addr, None
    if op == "ST":
        addr = regs[ins.srcs[0]] + ins.imm
        value = regs[ins.srcs[1]]
        if mmio.contains(addr):
            return _boss_store(addr, value, mmio)
        mem.write_word(addr, value)
        return STORE, addr, None
    if op == "VST":
        addr = regs[ins.srcs[0]] + ins.imm
        lane0 = ins.srcs[1]
        data = bytes(regs[r] & 0xFF for r in range(lane0, lane0 + ins.width))
        if mmio.contains(addr) or mmio.contains(addr + ins.width - 1):
            where = _decode_or_fault(addr, mmio)
            if not isinstance(where, Outcome) or where.slot + ins.width > mmio.outcomes_size:
                raise MemoryFault(addr, ins.width)
            return BOSS_OUTCOME, addr, tuple(data)
        mem.write(addr, data)
        return STORE, addr, None
    raise ValueError(f"{op} is not a data instruction")


def _decode_or_fault(addr, mmio):
    try:
        return mmio_decode(addr, mmio)
    except ReservedAddress:
        raise MemoryFault(addr) from None


def _boss_store(addr, value, mmio):
    where = _decode_or_fault(addr, mmio)
    if isinstance(where, Config):
        if where.offset != 0:
            raise MemoryFault(addr, WORD)
        return BOSS_CONFIG, addr, value
    return BOSS_OUTCOME, addr, value & 0xFF


class Machine:
    """Single-stepping interpreter over a flat Program."""

    def __init__(self, program: Program, regs=None, memory: Optional[Memory] = None, pc=None):
        self.program = program
        self.regs = list(regs) if regs is not None else [0] * 32
        self.mem = memory if memory is not None else Memory(program.data)
        self.pc = program.entry if pc is None else pc
        self.halted = False
        self.seq = 0
        self._dest = [program.labels[i.target] if i.is_branch else -1 for i in program.instructions]

    def fork(self) -> "Machine":
        m = Machine.__new__(Machine)
        m.program, m.regs, m.mem = self.program, list(self.regs), self.mem.fork()
        m.pc, m.halted, m.seq, m._dest = self.pc, self.halted, self.seq, self._dest
        return m

    def step(self) -> Optional[DynEvent]:
        """Execute one instruction; None once halted. Raises MemoryFault."""
        if self.halted:
            return None
        pc = self.pc
        instrs = self.program.instructions
        if pc >= len(instrs):
            self.halted = True
            return None
        ins = instrs[pc]
        op = ins.op
        if op == "BNZ" or op == "BZ":
            nz = self.regs[ins.srcs[0]] != 0
            taken = nz if op == "BNZ" else not nz
            self.pc = self._dest[pc] if taken else pc + 1
            ev = DynEvent(self.seq, pc, BRANCH, None, taken)
        elif op == "JMP":
            self.pc = self._dest[pc]
            ev = DynEvent(self.seq, pc, OTHER)
        elif op == "HALT":
            self.halted = True
            ev = DynEvent(self.seq, pc, OTHER)
        else:
            kind, addr, value = exec_data(ins, self.regs, self.mem, self.program.mmio)
            self.pc = pc + 1
            ev = DynEvent(self.seq, pc, kind, addr, None, value)
        self.seq += 1
        return ev


@dataclass
class DynTrace:
    program: Program
    events: list[DynEvent]
    regs: tuple[int, ...]
    memory: tuple[tuple[int, bytes], ...]
    status: str                       # "halted" | "truncated" | "fault"
    fault_addr: Optional[int] = None
    _profiles: dict = field(default_factory=dict, repr=False)

    @property
    def halted(self) -> bool:
        return self.status == "halted"

    @property
    def truncated(self) -> bool:
        return self.status == "truncated"

    @property
    def instruction_count(self) -> int:
        return len(self.events)

    def memory_delta(self) -> dict[int, int]:
        """Bytes whose final value differs from the initial image."""
        delta = {}
        for (addr, before), (_, after) in zip(self.program.data, self.memory):
            if before != after:
                for i, (x, y) in enumerate(zip(before, after)):
                    if x != y:
                        delta[addr + i] = y
        return delta


def execute(program: Program, step_limit: int = DEFAULT_STEP_LIMIT) -> DynTrace:
    if step_limit <= 0:
        raise ValueError("step_limit must be positive")
    m = Machine(program)
    events: list[DynEvent] = []
    status, fault = "truncated", None
    try:
        for _ in range(step_limit):
            ev = m.step()
            if ev is None:
                status = "halted"
                break
            events.append(ev)
        else:
            if m.halted or m.pc >= len(program):
                status = "halted"
    except MemoryFault as exc:
        status, fault = "fault", exc.addr
    return DynTrace(program, events, tuple(m.regs), m.mem.image(), status, fault)


def branch_profile(trace: DynTrace, pc: int) -> np.ndarray:
    """Outcomes (1 = taken) of every dynamic instance of the branch at ``pc``."""
    if not trace.program.instructions[pc].is_cond_branch:
        raise ValueError(f"pc {pc} is not a conditional branch")
    if pc not in trace._profiles:
        trace._profiles[pc] = np.array(
            [e.outcome for e in trace.events if e.pc == pc and e.kind == BRANCH], dtype=np.uint8)
    return trace._profiles[pc]


def generation_agreement(profile: np.ndarray, trip: int) -> float:
    """Fraction of outcomes equal to the same iteration of the previous generation."""
    bits = np.asarray(profile)
    gens = len(bits) // trip
    if gens < 2:
        raise ValueError("need at least two complete generations")
    grid = bits[:gens * trip].reshape(gens, trip)
    return float(np.mean(grid[1:] == grid[:-1]))


def dump_trace(trace: DynTrace) -> str:
    rows = []
    for e in trace.events:
        addr = "-" if e.addr is None else f"{e.addr:#x}"
        out = "-" if e.outcome is None else ("T" if e.outcome else "N")
        rows.append(f"{e.seq}\t{e.pc}\t{e.kind}\t{addr}\t{out}")
    return "\n".join(rows) + ("\n" if rows else "")


def strip_boss_stores(program: Program, trace: Optional[DynTrace] = None) -> Program:
    """Replace every store observed writing the BOSS range with a register no-op."""
    trace = trace or execute(program)
    pcs = {e.pc for e in trace.events if e.kind in (BOSS_CONFIG, BOSS_OUTCOME)}
    instrs = list(program.instructions)
    for pc in pcs:
        r = instrs[pc].srcs[1]
        instrs[pc] = Instruction("ADDI", r, (r,), 0)
    return Program(tuple(instrs), dict(program.labels), program.data, program.entry,
                   program.mmio, program.origin, program.targets, program.slice_loads)


def non_boss_events(trace: DynTrace, keyed_by_origin: bool = False) -> list[tuple]:
    """Committed events minus BOSS stores, as comparable tuples.

    With ``keyed_by_origin`` events are identified by the structured-source
    node that produced them, and generated code is dropped entirely.
    """
    out = []
    origin = trace.program.origin
    for e in trace.events:
        if e.kind in (BOSS_CONFIG, BOSS_OUTCOME):
            continue
        key = e.pc
        if keyed_by_origin:
            key = origin[e.pc] if origin else e.pc
            if key is None:
                continue
        out.append((key, e.kind, e.addr, e.outcome))
    return out
