"""Loop-aware structured programs, their text form, lowering and a direct interpreter.

The structured form is what the instrumenter works on: counted loops with an
explicit induction register and do-while loops, with ordinary instructions
and labels in between. ``lower`` flattens it into a :class:`Program`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import LoweringError, NestedTargetBranch
from .ir import (BREAK, AssemblyError, BossConfigImm, Instruction, MmioLayout,
                 Program, _LABEL, parse_instruction, parse_int, parse_reg,
                 strip_comment)
from .oracle import Memory, MemoryFault, exec_data

SCRATCH_END = 30   # holds a constant loop bound during the back-edge test
SCRATCH_CMP = 31   # back-edge comparison result
SCRATCH = (SCRATCH_END, SCRATCH_CMP)


@dataclass(frozen=True)
class Reg:
    index: int

    def __str__(self):
        return f"r{self.index}"


Operand = Union[int, Reg]


@dataclass(eq=False)
class Label:
    name: str


@dataclass(eq=False)
class Loop:
    """``for (ind = start; ind < end; ind += step)`` (``>`` for negative steps)."""
    induction: int
    start: Operand
    end: Operand
    step: Operand = 1
    body: list = field(default_factory=list)
    target: Optional[str] = None      # label placed right before the target branch
    end_label: Optional[str] = None   # names the first instruction after the loop

    def static_trip(self) -> Optional[int]:
        if isinstance(self.start, Reg) or isinstance(self.end, Reg) or isinstance(self.step, Reg):
            return None
        return trip_count(self.start, self.end, self.step)


@dataclass(eq=False)
class DoWhile:
    """``do { body } while (cond != 0)``; ``until_zero`` loops while ``cond == 0``."""
    body: list
    cond: int
    until_zero: bool = False


Node = Union[Instruction, Label, Loop, DoWhile]


@dataclass(eq=False)
class StructuredProgram:
    body: list
    data: list = field(default_factory=list)              # (addr, bytes)
    mmio: MmioLayout = MmioLayout()
    entry: Optional[str] = None
    # base register -> [lo, hi) address range it points into; feeds alias analysis
    regions: dict[int, tuple[int, int]] = field(default_factory=dict)
    # target branches of already flattened loops: (target label, End label or None)
    flat_targets: list = field(default_factory=list)


def trip_count(start: int, end: int, step: int) -> int:
    if step == 0:
        raise LoweringError("loop step must be nonzero")
    if step > 0:
        return max(0, -(-(end - start) // step))
    return max(0, -(-(start - end) // -step))


def walk(nodes):
    """Yield every node, depth first, in program order."""
    for n in nodes:
        yield n
        if isinstance(n, (Loop, DoWhile)):
            yield from walk(n.body)


def instructions_in(nodes):
    return [n for n in walk(nodes) if isinstance(n, Instruction)]


def registers_used(nodes) -> set[int]:
    regs: set[int] = set()
    for n in walk(nodes):
        if isinstance(n, Instruction):
            regs.update(n.reads())
            if n.dst is not None:
                regs.add(n.dst)
        elif isinstance(n, Loop):
            regs.add(n.induction)
            regs.update(o.index for o in (n.start, n.end, n.step) if isinstance(o, Reg))
        elif isinstance(n, DoWhile):
            regs.add(n.cond)
    return regs


def written_in(nodes) -> set[int]:
    out = set()
    for n in walk(nodes):
        if isinstance(n, Instruction) and n.dst is not None:
            out.add(n.dst)
        elif isinstance(n, Loop):
            out.add(n.induction)
    return out


def find_loops(nodes, pred=lambda loop: True):
    return [n for n in walk(nodes) if isinstance(n, Loop) and pred(n)]


def find_target_loop(sp: StructuredProgram, target: str) -> Loop:
    for loop in find_loops(sp.body):
        if loop.target == target:
            return loop
    raise LoweringError(f"no loop designates target {target!r}")


def check_target(loop: Loop) -> int:
    """Index of the target branch inside ``loop.body``; rejects nested targets."""
    body = loop.body
    pos = next((i for i, n in enumerate(body) if isinstance(n, Label) and n.name == loop.target), None)
    if pos is None:
        nested = any(isinstance(n, Label) and n.name == loop.target for n in walk(body))
        if nested:
            raise NestedTargetBranch(f"target {loop.target!r} is inside a nested loop")
        raise LoweringError(f"target label {loop.target!r} not found in its loop")
    br = pos + 1
    while br < len(body) and isinstance(body[br], Label):
        br += 1
    if br >= len(body) or not (isinstance(body[br], Instruction) and body[br].is_cond_branch):
        raise LoweringError(f"target {loop.target!r} does not label a conditional branch")
    label_pos = {n.name: i for i, n in enumerate(body) if isinstance(n, Label)}
    for i, n in enumerate(body):
        if not (isinstance(n, Instruction) and n.is_branch) or n.target == BREAK:
            continue
        dest = label_pos.get(n.target)
        if dest is None:
            continue
        if i < br < dest or (i > br and dest <= br):
            raise NestedTargetBranch(f"target {loop.target!r} is control dependent on pc-relative branch to {n.target!r}")
    return br


# --------------------------------------------------------------------------
# lowering


class _Emitter:
    def __init__(self):
        self.instrs: list[Instruction] = []
        self.origin: list = []
        self.labels: dict[str, int] = {}
        self.pending: list[str] = []
        self.node_pc: dict[int, int] = {}
        self.breaks: list[str] = []
        self.loops: list[Loop] = []
        self._ids = itertools.count()
        self._src = itertools.count()

    def fresh(self, hint: str) -> str:
        return f"__{hint}{next(self._ids)}"

    def label(self, name: str):
        if name in self.labels:
            raise LoweringError(f"duplicate label {name!r}")
        if name not in self.pending:
            self.pending.append(name)

    def emit(self, ins: Instruction, node=None):
        for name in self.pending:
            self.labels[name] = len(self.instrs)
        self.pending.clear()
        if node is not None:
            self.node_pc[id(node)] = len(self.instrs)
        # ordinal among hand-written instructions; stable across copies and insertions
        self.origin.append(next(self._src) if node is not None and node.tag is None else None)
        self.instrs.append(ins)


def _bound(em: _Emitter, operand: Operand) -> int:
    if isinstance(operand, Reg):
        return operand.index
    em.emit(Instruction("MOVI", SCRATCH_END, (), operand))
    return SCRATCH_END


def _lower_nodes(em: _Emitter, nodes):
    for n in nodes:
        if isinstance(n, Label):
            em.label(n.name)
        elif isinstance(n, Instruction):
            ins = n
            if n.target == BREAK:
                if not em.breaks:
                    raise LoweringError("@break outside of a loop")
                ins = n.with_target(em.breaks[-1])
            em.emit(ins, n)
        elif isinstance(n, Loop):
            _lower_loop(em, n)
        elif isinstance(n, DoWhile):
            top, exit_ = em.fresh("do"), em.fresh("od")
            em.label(top)
            em.breaks.append(exit_)
            _lower_nodes(em, n.body)
            em.breaks.pop()
            em.emit(Instruction("BZ" if n.until_zero else "BNZ", None, (n.cond,), target=top))
            em.label(exit_)
        else:
            raise LoweringError(f"unknown node {n!r}")


def _lower_loop(em: _Emitter, loop: Loop):
    if loop.target is not None:
        check_target(loop)
    if isinstance(loop.step, Reg) or loop.step == 0:
        raise LoweringError("loop step must be a nonzero constant")
    k, step = loop.induction, loop.step
    if isinstance(loop.start, Reg):
        em.emit(Instruction("MOV", k, (loop.start.index,)))
    else:
        em.emit(Instruction("MOVI", k, (), loop.start))
    head, exit_ = em.fresh("head"), em.fresh("exit")
    trip = loop.static_trip()
    cmp = "CMP_GE" if step > 0 else "CMP_LE"
    if trip is None or trip == 0:
        er = _bound(em, loop.end)
        em.emit(Instruction(cmp, SCRATCH_CMP, (k, er)))
        em.emit(Instruction("BNZ", None, (SCRATCH_CMP,), target=exit_))
    em.label(head)
    em.breaks.append(exit_)
    em.loops.append(loop)
    _lower_nodes(em, loop.body)
    em.loops.pop()
    em.breaks.pop()
    em.emit(Instruction("ADDI", k, (k,), step))
    er = _bound(em, loop.end)
    em.emit(Instruction(cmp, SCRATCH_CMP, (k, er)))
    em.emit(Instruction("BZ", None, (SCRATCH_CMP,), target=head))
    em.label(exit_)
    if loop.end_label:
        em.label(loop.end_label)


def lower_with_map(sp: StructuredProgram) -> tuple[Program, dict[int, int]]:
    """Lower and also return ``id(node) -> pc`` for every source instruction."""
    has_loops = any(isinstance(n, (Loop, DoWhile)) for n in walk(sp.body))
    if has_loops:
        bad = registers_used(sp.body) & set(SCRATCH)
        if bad:
            raise LoweringError(f"registers {sorted(bad)} are reserved for loop lowering")
    em = _Emitter()
    _lower_nodes(em, sp.body)
    if em.pending:
        em.emit(Instruction("HALT"))
    labels = em.labels
    instrs = []
    for ins in em.instrs:
        if isinstance(ins.imm, BossConfigImm):
            ins = Instruction(ins.op, ins.dst, ins.srcs, ins.imm.resolve(labels), ins.target, ins.width, ins.tag)
        instrs.append(ins)
    for ins in instrs:
        if ins.is_branch and ins.target not in labels:
            raise LoweringError(f"undefined label {ins.target!r}")
    # the target label sits on the branch itself
    targets = {labels[lp.target]: labels.get(lp.end_label) if lp.end_label else None
               for lp in find_loops(sp.body, lambda lp: lp.target is not None)}
    for t, e in sp.flat_targets:
        targets.setdefault(labels[t], labels[e] if e is not None else None)
    entry = labels[sp.entry] if sp.entry is not None else 0
    prog = Program(tuple(instrs), labels, tuple(sp.data), entry, sp.mmio,
                   origin=tuple(em.origin), targets=targets)
    return prog, em.node_pc


def lower(sp: StructuredProgram) -> Program:
    return lower_with_map(sp)[0]


# --------------------------------------------------------------------------
# text form


def parse_structured(text: str) -> StructuredProgram:
    sp = StructuredProgram(body=[])
    stack: list[tuple[list, object, int]] = [(sp.body, None, 0)]
    mmio_base = None
    used_labels: list[tuple[str, int]] = []

    def operand(tok: str, line: int) -> Operand:
        tok = tok.strip()
        return Reg(parse_reg(tok, line)) if tok.startswith("r") else parse_int(tok, line)

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = strip_comment(raw)
        if not line:
            continue
        cur = stack[-1][0]
        if line.startswith("."):
            parts = line.split(None, 1)
            d, rest = parts[0], parts[1] if len(parts) > 1 else ""
            if d == ".mmio_base":
                mmio_base = parse_int(rest.strip(), lineno)
            elif d == ".target":
                toks = rest.split()
                if len(toks) not in (1, 2):
                    raise AssemblyError(".target expects LABEL [END]", lineno)
                sp.flat_targets.append((toks[0], toks[1] if len(toks) == 2 else None))
                used_labels.extend((t, lineno) for t in toks)
            elif d == ".entry":
                sp.entry = rest.strip()
            elif d == ".data":
                toks = rest.split()
                if not toks:
                    raise AssemblyError(".data needs an address", lineno)
                vals = [parse_int(t, lineno) for t in toks[1:]]
                if any(not 0 <= v < 256 for v in vals):
                    raise AssemblyError(".data bytes must be in 0..255", lineno)
                sp.data.append((parse_int(toks[0], lineno), bytes(vals)))
            elif d == ".region":
                toks = rest.split()
                if len(toks) != 3:
                    raise AssemblyError(".region expects rN lo hi", lineno)
                sp.regions[parse_reg(toks[0], lineno)] = (parse_int(toks[1], lineno), parse_int(toks[2], lineno))
            elif d == ".loop":
                toks = [t.strip() for t in rest.split(",")]
                opts = {}
                pos = []
                for t in toks:
                    for word in t.split():
                        if "=" in word:
                            key, val = word.split("=", 1)
                            opts[key] = val
                        else:
                            pos.append(word)
                if len(pos) not in (3, 4):
                    raise AssemblyError(".loop expects rK, start, end[, step]", lineno)
                loop = Loop(parse_reg(pos[0], lineno), operand(pos[1], lineno), operand(pos[2], lineno),
                            operand(pos[3], lineno) if len(pos) == 4 else 1, [],
                            opts.get("target"), opts.get("end"))
                cur.append(loop)
                stack.append((loop.body, loop, lineno))
            elif d == ".endloop":
                if not isinstance(stack[-1][1], Loop):
                    raise AssemblyError(".endloop without .loop", lineno)
                stack.pop()
            elif d == ".do":
                node = DoWhile([], 0)
                cur.append(node)
                stack.append((node.body, node, lineno))
            elif d in (".while", ".until"):
                node = stack[-1][1]
                if not isinstance(node, DoWhile):
                    raise AssemblyError(f"{d} without .do", lineno)
                node.cond = parse_reg(rest.strip(), lineno)
                node.until_zero = d == ".until"
                stack.pop()
            else:
                raise AssemblyError(f"unknown directive {d}", lineno)
            continue
        m = _LABEL.match(line)
        if m:
            cur.append(Label(m.group(1)))
            continue
        ins = parse_instruction(line, lineno)
        if ins.target is not None:
            used_labels.append((ins.target, lineno))
        cur.append(ins)
    if len(stack) > 1:
        raise AssemblyError("unterminated .loop/.do block", stack[-1][2])
    if mmio_base is not None:
        sp.mmio = MmioLayout(base=mmio_base)
    defined = {n.name for n in walk(sp.body) if isinstance(n, Label)}
    defined |= {lp.end_label for lp in find_loops(sp.body) if lp.end_label}
    for name, lineno in used_labels:
        if name != BREAK and name not in defined:
            raise AssemblyError(f"undefined label {name!r}", lineno)
    if sp.entry is not None and sp.entry not in defined:
        raise AssemblyError(f"undefined entry label {sp.entry!r}")
    return sp


# --------------------------------------------------------------------------
# direct interpreter (differential reference for lowering)


class _Halt(Exception):
    pass


class _Break(Exception):
    pass


def interpret_structured(sp: StructuredProgram, step_limit: int = 1_000_000):
    """Execute the structured form directly. Returns ``(regs, memory image)``.

    Branches may only target labels of their own block or ``@break``.
    """
    regs = [0] * 32
    mem = Memory(tuple(sp.data))
    budget = [step_limit]

    def tick():
        budget[0] -= 1
        if budget[0] < 0:
            raise RuntimeError("step limit exceeded")

    def value(op: Operand) -> int:
        return regs[op.index] if isinstance(op, Reg) else op

    def run(nodes):
        labels = {n.name: i for i, n in enumerate(nodes) if isinstance(n, Label)}
        i = 0
        while i < len(nodes):
            n = nodes[i]
            if isinstance(n, Label):
                i += 1
            elif isinstance(n, Instruction):
                tick()
                if n.op == "HALT":
                    raise _Halt
                if n.is_branch:
                    if n.op == "JMP":
                        taken = True
                    else:
                        nz = regs[n.srcs[0]] != 0
                        taken = nz if n.op == "BNZ" else not nz
                    if taken:
                        if n.target == BREAK:
                            raise _Break
                        if n.target not in labels:
                            raise LoweringError(f"branch to {n.target!r} leaves its block")
                        i = labels[n.target]
                        continue
                    i += 1
                    continue
                exec_data(n, regs, mem, sp.mmio)
                i += 1
            elif isinstance(n, Loop):
                k = n.induction
                regs[k] = value(n.start)
                step = n.step
                try:
                    while (regs[k] < value(n.end)) if step > 0 else (regs[k] > value(n.end)):
                        run(n.body)
                        regs[k] += step
                        tick()
                except _Break:
                    pass
                i += 1
            elif isinstance(n, DoWhile):
                try:
                    while True:
                        run(n.body)
                        tick()
                        if (regs[n.cond] == 0) != n.until_zero:
                            break
                except _Break:
                    pass
                i += 1

    try:
        run(sp.body)
    except _Halt:
        pass
    except MemoryFault:
        raise
    return regs, mem.image()
