"""Pre-execute loop synthesis for a designated load-dependent branch.

Pipeline: locate the target loop, check its induction variable, slice the
branch condition backward through the loop body, check the slice's loads
cannot alias stores made inside the loop, then generate a loop that runs
the slice ahead of time and stores one outcome byte per iteration into a
BOSS channel. The original loop is left as it was.
"""
from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass
from typing import Optional, Union

from .errors import (InstrumentError, LoopCarriedDependence, NotCanonical,
                     SliceEscapesLoop)
from .ir import (BossConfigImm, Instruction, MmioLayout, Program, VST_WIDTHS)
from .errors import LoweringError
from .structured import (SCRATCH, DoWhile, Label, Loop, Operand, Reg,
                         StructuredProgram, check_target, lower_with_map,
                         registers_used, trip_count, walk, written_in)

log = logging.getLogger(__name__)

TAG = "boss"
CMP_OPS = {"CMP_EQ", "CMP_LE", "CMP_GE"}


# --------------------------------------------------------------------------
# options


@dataclass(frozen=True)
class InstrumentOptions:
    channel: int = 0
    variant: str = "plain"            # plain | unrolled | vectorized
    factor: int = 1                   # unroll factor or vector width
    coverage: Optional[tuple[int, int]] = None
    strip_cap: int = 256
    placement: str = "earliest"       # earliest | late

    def __post_init__(self):
        if self.variant not in ("plain", "unrolled", "vectorized"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "unrolled" and self.factor < 2:
            raise ValueError("unroll factor must be >= 2")
        if self.variant == "vectorized" and self.factor not in VST_WIDTHS:
            raise ValueError(f"vector width must be one of {VST_WIDTHS}")
        if self.placement not in ("earliest", "late"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.coverage is not None:
            n, m = self.coverage
            if not 0 <= n <= m:
                raise ValueError("coverage range needs 0 <= n <= m")
        if not 1 <= self.strip_cap <= 256:
            raise ValueError("strip_cap must be in 1..256")

    @property
    def label(self) -> str:
        v = {"plain": "plain", "unrolled": f"unroll:{self.factor}", "vectorized": f"vec:{self.factor}"}[self.variant]
        if self.coverage:
            v += f"@{self.coverage[0]}-{self.coverage[1]}"
        return v


_VARIANT = re.compile(r"^(plain|loop|unroll(?:ed)?|vec(?:torized)?)(?:[:(](\d+)\)?)?$")


def parse_variant(text: str) -> tuple[str, int]:
    """``plain``, ``unroll:4`` / ``unrolled(4)``, ``vec:8`` / ``vectorized(8)``."""
    m = _VARIANT.match(text.strip().lower())
    if not m:
        raise ValueError(f"bad variant {text!r}")
    kind, n = m.group(1), m.group(2)
    if kind in ("plain", "loop"):
        if n:
            raise ValueError("plain takes no factor")
        return "plain", 1
    if n is None:
        raise ValueError(f"variant {text!r} needs a factor")
    return ("unrolled" if kind.startswith("unroll") else "vectorized"), int(n)


def parse_range(text: str) -> tuple[int, int]:
    a, sep, b = text.partition(":")
    if not sep:
        a, sep, b = text.partition("-")
    if not sep:
        raise ValueError(f"bad range {text!r}, expected n:m")
    return int(a), int(b)


# --------------------------------------------------------------------------
# analysis


@dataclass(frozen=True)
class Induction:
    register: int
    start: Operand
    end: Operand
    step: int


def find_induction(loop: Loop) -> Induction:
    """Canonical induction descriptor of ``loop``; raises NotCanonical."""
    k = loop.induction
    if isinstance(loop.step, Reg) or not isinstance(loop.step, int) or loop.step == 0:
        raise NotCanonical("loop step must be a nonzero constant")
    written = written_in(loop.body)
    if k in written:
        raise NotCanonical(f"induction register r{k} is also written inside the loop body")
    for what, op in (("start", loop.start), ("end", loop.end)):
        if isinstance(op, Reg) and op.index in written:
            raise NotCanonical(f"loop {what} register r{op.index} is modified inside the loop")
    return Induction(k, loop.start, loop.end, loop.step)


@dataclass(frozen=True)
class Backslice:
    instructions: tuple[Instruction, ...]
    live_ins: frozenset[int]
    loads: tuple[Instruction, ...]
    cond: int
    branch: Instruction

    @property
    def negate(self) -> bool:
        return self.branch.op == "BZ"


def _regions_overlap(a, b) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def _provenance(loop: Loop, regions: dict[int, tuple[int, int]]):
    """Region each load/store address may touch, walking the body in order.

    Returns ``{id(instruction): region or None}`` for every memory op.
    """
    reg = dict(regions)
    out = {}
    for n in walk(loop.body):
        if not isinstance(n, Instruction):
            if isinstance(n, Loop):
                reg.pop(n.induction, None)
            continue
        if n.op in ("LD", "ST", "VST"):
            out[id(n)] = reg.get(n.srcs[0])
        if n.dst is None:
            continue
        if n.op == "ADD":
            rs = [reg.get(s) for s in n.srcs]
            hits = [r for r in rs if r is not None]
            reg[n.dst] = hits[0] if len(hits) == 1 else None
        elif n.op in ("ADDI", "MOV"):
            reg[n.dst] = reg.get(n.srcs[0])
        else:
            reg[n.dst] = None
        if reg[n.dst] is None:
            del reg[n.dst]
    return out


def extract_backslice(loop: Loop, regions: Optional[dict[int, tuple[int, int]]] = None,
                      mmio: MmioLayout = MmioLayout()) -> Backslice:
    """Dataflow-closed slice feeding the target branch of ``loop``."""
    br = check_target(loop)
    body = loop.body
    branch = body[br]
    k = loop.induction
    need = {branch.srcs[0]}
    picked = []
    for i in range(br - 1, -1, -1):
        n = body[i]
        if isinstance(n, (Loop, DoWhile)):
            if written_in([n]) & need:
                raise SliceEscapesLoop("branch condition depends on a value computed in a nested loop")
            continue
        if not isinstance(n, Instruction) or n.dst is None or n.dst not in need:
            continue
        need.discard(n.dst)
        need.update(n.reads())
        picked.append(n)
    picked.reverse()
    # any branch that could skip a slice instruction makes the slice control dependent
    labels = {n.name: i for i, n in enumerate(body) if isinstance(n, Label)}
    slice_pos = [i for i, n in enumerate(body) if any(n is p for p in picked)]
    for i, n in enumerate(body[:br]):
        if isinstance(n, Instruction) and n.is_branch:
            dest = labels.get(n.target, len(body))
            if any(i < p < dest for p in slice_pos):
                raise SliceEscapesLoop(f"slice instruction is control dependent on branch to {n.target!r}")
    written = written_in(body)
    for r in sorted(need):
        if r != k and r in written:
            raise LoopCarriedDependence(f"slice live-in r{r} is written inside the loop")
    loads = tuple(n for n in picked if n.op == "LD")
    regions = regions or {}
    prov = _provenance(loop, regions)
    # generated hint stores only ever address the BOSS window
    stores = [n for n in walk(body) if isinstance(n, Instruction) and n.op in ("ST", "VST") and n.tag != TAG]
    for ld in loads:
        lr = prov.get(id(ld))
        if lr is None and stores:
            raise LoopCarriedDependence(f"cannot bound the address of slice load `{ld.text()}`")
        for st in stores:
            sr = prov.get(id(st))
            if sr is None:
                raise LoopCarriedDependence(f"cannot bound the address of store `{st.text()}` in the loop")
            if _regions_overlap(lr, sr):
                raise LoopCarriedDependence(f"store `{st.text()}` may alias slice load `{ld.text()}`")
    return Backslice(tuple(picked), frozenset(need), loads, branch.srcs[0], branch)


# --------------------------------------------------------------------------
# code generation


class _Regs:
    def __init__(self, used):
        self.free = [r for r in range(1, 32) if r not in used and r not in SCRATCH]

    def take(self, n: int = 1) -> list[int]:
        if len(self.free) < n:
            raise InstrumentError("not enough free registers for the pre-execute loop")
        out, self.free = self.free[:n], self.free[n:]
        return out

    def one(self) -> int:
        return self.take(1)[0]

    def run(self, n: int) -> int:
        """First register of ``n`` consecutive free registers."""
        free = set(self.free)
        for r in self.free:
            if all(r + j in free for j in range(n)):
                for j in range(n):
                    self.free.remove(r + j)
                return r
        raise InstrumentError(f"no {n} consecutive free registers for vector lanes")


def _b(op, dst=None, srcs=(), imm=None, target=None, width=None) -> Instruction:
    return Instruction(op, dst, tuple(srcs), imm, target, width, tag=TAG)


class _Gen:
    """Per-instrumentation code generator state."""

    def __init__(self, sp: StructuredProgram, sl: Backslice, ind: Induction, ch: int, lanes: int = 0):
        self.sp = sp
        self.sl = sl
        self.ind = ind
        self.ch = ch
        self.regs = _Regs(registers_used(sp.body))
        # the consecutive lane run is the hardest request, so it goes first
        self.lane0 = self.regs.run(lanes) if lanes else None
        defs = list(dict.fromkeys(ins.dst for ins in sl.instructions))
        self.temps = dict(zip(defs, self.regs.take(len(defs))))
        self.zero = None
        self.labels = _fresh_labels(sp)
        if sl.negate or not self._cmp_final():
            self.zero = self.regs.one()

    def _cmp_final(self) -> bool:
        return bool(self.sl.instructions) and self.sl.instructions[-1].op in CMP_OPS \
            and self.sl.instructions[-1].dst == self.sl.cond

    def prologue(self) -> list:
        return [_b("MOVI", self.zero, (), 0)] if self.zero is not None else []

    def lane(self, kreg: int, out: int) -> list[Instruction]:
        """Slice for the iteration whose induction value is in ``kreg``, outcome byte into ``out``."""
        ren = {self.ind.register: kreg}
        code = []
        last = len(self.sl.instructions) - 1
        direct = not self.sl.negate and self._cmp_final()
        for i, ins in enumerate(self.sl.instructions):
            srcs = tuple(ren.get(r, r) for r in ins.srcs)
            dst = out if (direct and i == last) else self.temps[ins.dst]
            code.append(_b(ins.op, dst, srcs, ins.imm, None, ins.width))
            ren[ins.dst] = dst
        if not direct:
            c = ren.get(self.sl.cond, self.sl.cond)
            code.append(_b("CMP_EQ", out, (c, self.zero)))
            if not self.sl.negate:
                code.append(_b("CMP_EQ", out, (out, self.zero)))
        return code


def _fresh_labels(sp):
    taken = {n.name for n in walk(sp.body) if isinstance(n, Label)}
    taken |= {lp.end_label for lp in walk(sp.body) if isinstance(lp, Loop) and lp.end_label}
    counter = [0]

    def fresh(hint):
        while True:
            counter[0] += 1
            name = f"__boss_{hint}{counter[0]}"
            if name not in taken:
                taken.add(name)
                return name
    return fresh


def _min_into(g: _Gen, dst: int, end: Operand, step: int) -> list:
    """``dst = min(dst, end)`` for positive steps (``max`` for negative)."""
    code = []
    if isinstance(end, Reg):
        er = end.index
    else:
        er = g.regs.one()
        code.append(_b("MOVI", er, (), end))
    t = g.regs.one()
    skip = g.labels("clamp")
    code += [_b("CMP_LE" if step > 0 else "CMP_GE", t, (dst, er)),
             _b("BNZ", None, (t,), target=skip),
             _b("MOV", dst, (er,)),
             Label(skip)]
    return code


def _value_into(g: _Gen, dst: int, base: Operand, offset: int) -> list:
    if isinstance(base, Reg):
        return [_b("ADDI", dst, (base.index,), offset)]
    return [_b("MOVI", dst, (), base + offset)]


def generate_preexec(g: _Gen, start: Operand, end: Operand, slot0: int,
                     options: InstrumentOptions) -> list:
    """Nodes running the slice for induction values in ``[start, end)``.

    Outcomes go to consecutive slots starting at ``slot0``.
    """
    step = g.ind.step
    mmio = g.sp.mmio
    ptr = g.regs.one()
    code = g.prologue() + [_b("MOVI", ptr, (), mmio.outcome_addr(g.ch, slot0))]
    kp = g.regs.one()

    def scalar_loop(ind, lo):
        out = g.lane0 if g.lane0 is not None else g.regs.one()
        body = g.lane(ind, out) + [_b("ST", None, (ptr, out), 0), _b("ADDI", ptr, (ptr,), 1)]
        return Loop(ind, lo, end, step, body)

    if options.variant == "plain":
        code.append(scalar_loop(kp, start))
        return code

    f = options.factor
    # main loop covers iterations whose last lane is still in range
    if isinstance(end, Reg) or isinstance(start, Reg):
        eu = g.regs.one()
        code += _value_into(g, eu, end, -(f - 1) * step)
        main_end: Operand = Reg(eu)
    else:
        main_end = start + (trip_count(start, end, step) // f) * f * step
    kj = g.regs.one()
    if options.variant == "unrolled":
        out = g.regs.one()
        body = []
        for j in range(f):
            body.append(_b("ADDI", kj, (kp,), j * step))
            body += g.lane(kj, out)
            body.append(_b("ST", None, (ptr, out), j))
        body.append(_b("ADDI", ptr, (ptr,), f))
    else:
        lane0 = g.lane0
        body = []
        for j in range(f):
            body.append(_b("ADDI", kj, (kp,), j * step))
            body += g.lane(kj, lane0 + j)
        body += [_b("VST", None, (ptr, lane0), 0, width=f), _b("ADDI", ptr, (ptr,), f)]
    if main_end != start:
        code.append(Loop(kp, start, main_end, f * step, body))
    # the remainder continues on the same induction register
    if isinstance(main_end, int):
        if main_end != end:
            code.append(scalar_loop(kp, main_end))
    else:
        code.append(scalar_loop(kp, Reg(kp)))
    return code


def strip_mine(loop: Loop, cap: int = 256, fresh_label=None, chunk_reg: Optional[int] = None,
               cend_reg: Optional[int] = None, tmp_regs: tuple = ()):
    """Split ``loop`` into a chunk loop over inner loops of at most ``cap`` iterations.

    Returns ``(nodes, inner_loop, chunk_loop)``; identity (``[loop], loop, None``)
    when the trip count is static and fits. The inner loop's ``end_label``
    names the first instruction after each chunk, so every chunk is one
    generation.
    """
    trip = loop.static_trip()
    if trip is not None and trip <= cap:
        return [loop], loop, None
    if chunk_reg is None or cend_reg is None or fresh_label is None:
        raise ValueError("strip_mine needs a chunk register, a chunk-end register and a label source")
    step = loop.step
    kc, ce = chunk_reg, cend_reg
    inner = Loop(loop.induction, Reg(kc), Reg(ce), step, loop.body, loop.target, fresh_label("chunk_end"))
    if isinstance(loop.end, Reg):
        er, set_end = loop.end.index, []
    else:
        er = tmp_regs[0]
        set_end = [_b("MOVI", er, (), loop.end)]
    t = tmp_regs[1]
    skip = fresh_label("clamp")
    clamp = [_b("ADDI", ce, (kc,), cap * step)] + set_end + [
        _b("CMP_LE" if step > 0 else "CMP_GE", t, (ce, er)),
        _b("BNZ", None, (t,), target=skip),
        _b("MOV", ce, (er,)),
        Label(skip)]
    chunk = Loop(kc, loop.start, loop.end, cap * step, clamp + [inner], None, loop.end_label)
    init = _b("MOV", loop.induction, (loop.start.index,)) if isinstance(loop.start, Reg) \
        else _b("MOVI", loop.induction, (), loop.start)
    return [init, chunk], inner, chunk


# --------------------------------------------------------------------------
# driver


@dataclass
class InstrumentResult:
    program: Optional[Program]
    structured: StructuredProgram
    diagnostic: Optional[InstrumentError] = None
    backslice: Optional[Backslice] = None
    induction: Optional[Induction] = None
    placement_index: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.diagnostic is None


def _clone(nodes):
    """Copy containers, keep instruction and label objects (their ids key provenance)."""
    out = []
    for n in nodes:
        if isinstance(n, Loop):
            out.append(dataclasses.replace(n, body=_clone(n.body)))
        elif isinstance(n, DoWhile):
            out.append(dataclasses.replace(n, body=_clone(n.body)))
        else:
            out.append(n)
    return out


def clone_program(sp: StructuredProgram) -> StructuredProgram:
    return dataclasses.replace(sp, body=_clone(sp.body), data=list(sp.data), regions=dict(sp.regions))


def locate_target(sp: StructuredProgram, target: str):
    """``(loop, containing block, index of loop in block)`` for the innermost loop labelling ``target``."""
    def search(block):
        for i, n in enumerate(block):
            if isinstance(n, (Loop, DoWhile)):
                found = search(n.body)
                if found:
                    return found
                if isinstance(n, Loop) and (n.target == target or any(
                        isinstance(x, Label) and x.name == target for x in n.body)):
                    return n, block, i
        return None
    found = search(sp.body)
    if found is None:
        raise InstrumentError(f"no loop contains target label {target!r}")
    return found


def _placement(block, idx: int, avoid: set[int], mode: str) -> int:
    if mode == "late":
        return idx
    i = idx
    while i > 0:
        n = block[i - 1]
        if not isinstance(n, Instruction):
            break
        if n.is_branch or n.op in ("ST", "VST", "HALT"):
            break
        if n.dst is not None and n.dst in avoid:
            break
        i -= 1
    return i


def _open_index(sp: StructuredProgram) -> int:
    if sp.entry is not None:
        for i, n in enumerate(sp.body):
            if isinstance(n, Label) and n.name == sp.entry:
                return i + 1
    return 0


def lower_with_slices(sp: StructuredProgram, slices: dict[str, tuple]) -> Program:
    """Lower, recording the pcs of each target's slice loads for the timing model."""
    prog, node_pc = lower_with_map(sp)
    sl = {}
    for name, loads in slices.items():
        if name in prog.labels:
            sl[prog.labels[name]] = tuple(node_pc[id(ld)] for ld in loads if id(ld) in node_pc)
    return dataclasses.replace(prog, slice_loads={**prog.slice_loads, **sl})


def instrument(program: Union[StructuredProgram, str], target: str,
               options: InstrumentOptions = InstrumentOptions()) -> InstrumentResult:
    """Insert a BOSS pre-execute loop for the branch labelled ``target``.

    Never raises for analysis failures: the result then carries the
    original program (None if even that cannot be lowered) and the diagnostic.
    """
    from .structured import parse_structured
    sp = parse_structured(program) if isinstance(program, str) else program
    try:
        return _instrument(sp, target, options)
    except InstrumentError as exc:
        log.warning("instrumentation rejected: [%s] %s", exc.code, exc)
        try:
            original = lower_with_map(sp)[0]
        except LoweringError:
            original = None          # the source itself does not lower
        return InstrumentResult(original, sp, exc)


def _instrument(sp0: StructuredProgram, target: str, options: InstrumentOptions) -> InstrumentResult:
    if not 0 <= options.channel < sp0.mmio.channels:
        raise InstrumentError(f"channel {options.channel} out of range")
    sp = clone_program(sp0)
    loop, block, idx = locate_target(sp, target)
    if loop.target is None:
        loop.target = target
    elif loop.target != target:
        raise InstrumentError(f"loop already designates target {loop.target!r}")
    ind = find_induction(loop)
    sl = extract_backslice(loop, sp.regions, sp.mmio)
    trip = loop.static_trip()
    g = _Gen(sp, sl, ind, options.channel, options.factor if options.variant == "vectorized" else 0)

    start, end = ind.start, ind.end
    slot0 = 0
    empty = False
    if options.coverage is not None:
        n, m = options.coverage
        if trip is not None and m >= trip:
            log.warning("coverage %d:%d clamped to trip count %d", n, m, trip)
            m = trip - 1
            empty = n > m
        slot0 = n
    if options.coverage is not None:
        # the range itself bounds the slots used, so the loop is never strip mined
        needs_strip = False
        # iteration i reads slot i mod size, so a slot past the first lap is
        # consumed by an earlier iteration before the one it was written for
        if not empty and m >= sp.mmio.outcomes_size:
            raise InstrumentError(f"coverage range {n}:{m} reaches past the {sp.mmio.outcomes_size} channel slots")
    else:
        needs_strip = trip is None or trip > options.strip_cap

    avoid = set(sl.live_ins) | {o.index for o in (ind.start, ind.end) if isinstance(o, Reg)}
    if needs_strip:
        kc, ce = g.regs.take(2)
        tmp = tuple(g.regs.take(2))
        nodes, inner, chunk = strip_mine(loop, options.strip_cap, g.labels, kc, ce, tmp)
        pre = generate_preexec(g, Reg(kc), Reg(ce), 0, options)
        # pre-execute each chunk right before its inner loop
        pos = chunk.body.index(inner)
        chunk.body[pos:pos] = pre
        block[idx:idx + 1] = nodes
        end_label = inner.end_label
        place = idx
    else:
        if empty:
            pre = []
        elif options.coverage is not None:
            n, m = slot0, (m if trip is not None else options.coverage[1])
            lo = _offset(start, n * ind.step)
            hi = _offset(start, (m + 1) * ind.step)
            if trip is None:
                hi_reg = g.regs.one()
                pre = _value_into(g, hi_reg, start, (m + 1) * ind.step) + _min_into(g, hi_reg, end, ind.step)
                pre += generate_preexec(g, lo, Reg(hi_reg), slot0, options)
            else:
                pre = generate_preexec(g, lo, hi, slot0, options)
        else:
            pre = generate_preexec(g, start, end, 0, options)
        if loop.end_label is None:
            loop.end_label = g.labels("end")
        end_label = loop.end_label
        place = _placement(block, idx, avoid, options.placement)
        block[place:place] = pre

    # the opener runs before anything else, so it may share registers with the generated loops
    cfg, addr = _Regs(registers_used(sp0.body)).take(2)
    opener = [_b("MOVI", cfg, (), BossConfigImm(target, end_label)),
              _b("MOVI", addr, (), sp.mmio.config_addr(options.channel)),
              _b("ST", None, (addr, cfg), 0)]
    at = _open_index(sp)
    sp.body[at:at] = opener
    if sp.body is block and at <= place:
        place += len(opener)
    prog = lower_with_slices(sp, {target: sl.loads})
    return InstrumentResult(prog, sp, None, sl, ind, place)


def _offset(base: Operand, delta: int) -> Operand:
    if isinstance(base, Reg):
        if delta == 0:
            return base
        raise InstrumentError("coverage ranges need a constant loop start")
    return base + delta
