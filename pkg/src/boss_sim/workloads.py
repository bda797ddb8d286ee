"""Deterministic generators for the load-dependent-branch loop patterns.

Every builder emits structured assembly text, parses it, and checks that
the oracle trace of the target branch matches an outcome schedule computed
independently in numpy from the same seeded data.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .instrument import (TAG, Instruction, extract_backslice, locate_target,
                         lower_with_slices)
from .ir import BossConfigImm, MmioLayout, Program
from .oracle import branch_profile, execute
from .structured import Label, StructuredProgram, parse_structured, registers_used

KINDS = ("kill_neighbours", "kill_or_connect", "record_replay", "correlated", "synthetic")
BOARD_W = 8                              # row width used by the neighbour offsets
DIRS = (-BOARD_W, -1, 1, BOARD_W)
POS_SPACING = 17
DATA_BASE = 0x10000
LINE = 64


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "synthetic"
    trip: int = 4
    generations: int = 8
    seed: int = 0
    bias: float = 0.5           # synthetic: P(taken)
    repeat_prob: float = 0.93   # record_replay: adjacent-generation agreement
    corr_prob: float = 1.0      # correlated: P(target outcome == source outcome)
    chain_depth: int = 1        # synthetic: loads feeding the branch
    placement: str = "hot"      # hot: warm-up pass over the data; cold: one line per element, never warmed
    filler: int = 200           # independent instructions between pre-execute point and target loop

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.trip < 1 or self.generations < 1:
            raise ValueError("trip and generations must be >= 1")
        for name in ("bias", "repeat_prob", "corr_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.chain_depth < 1:
            raise ValueError("chain_depth must be >= 1")
        if self.placement not in ("hot", "cold"):
            raise ValueError("placement must be hot or cold")
        if self.filler < 0:
            raise ValueError("filler must be >= 0")
        if self.kind in ("kill_neighbours", "kill_or_connect") and self.trip != 4:
            raise ValueError(f"{self.kind} has four neighbours; trip must be 4")
        if self.kind in ("record_replay", "correlated") and self.trip > 128:
            raise ValueError(f"{self.kind} needs trip <= 128 so hint slots do not collide")


@dataclass
class Workload:
    spec: WorkloadSpec
    source: str
    structured: StructuredProgram
    program: Program
    target: str
    target_pc: int
    schedule: np.ndarray
    end: str = "E"
    source_target: Optional[str] = None     # correlated: the feeding branch

    def fresh_structured(self) -> StructuredProgram:
        return parse_structured(self.source)


# --------------------------------------------------------------------------
# text helpers


def _data_lines(addr: int, words) -> list[str]:
    raw = b"".join(int(w).to_bytes(8, "little", signed=True) for w in words)
    return [f".data {addr + i:#x} " + " ".join(str(b) for b in raw[i:i + 32]) for i in range(0, len(raw), 32)]


def _padded(addr, stride, words):
    """Declare the whole strided block (gaps included) so any word in it is addressable."""
    if stride == 8:
        return _data_lines(addr, words)
    flat = np.zeros(len(words) * (stride // 8), dtype=np.int64)
    flat[:: stride // 8] = words
    return _data_lines(addr, flat)


def _filler(n: int) -> list[str]:
    return ["    ADDI r26, r26, 1"] * n


def _warmup(lo: int, hi: int) -> list[str]:
    return [f".loop r26, {lo:#x}, {hi:#x}, {LINE}", "    LD r27, [r26+0]", ".endloop"]


def _flip_exact(rng, n: int, p_keep: float) -> np.ndarray:
    """Boolean mask of exactly round((1 - p_keep) * n) flipped positions."""
    flips = int(round((1.0 - p_keep) * n))
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=flips, replace=False)] = True
    return mask


# --------------------------------------------------------------------------
# builders


def _kill_common(spec: WorkloadSpec, rng):
    g = spec.generations
    positions = BOARD_W + 1 + POS_SPACING * np.arange(g)
    cells = int(positions[-1] + BOARD_W + 1)
    stride = 8 if spec.placement == "hot" else LINE
    nxt = np.zeros(cells, dtype=np.int64)
    for a, b in zip(positions[:-1], positions[1:]):
        nxt[a] = b
    return positions, cells, stride, nxt


def _build_kill_neighbours(spec: WorkloadSpec):
    rng = np.random.default_rng(spec.seed)
    positions, cells, stride, nxt = _kill_common(spec, rng)
    square = rng.integers(0, 3, size=cells)       # 0 empty, 1 black, 2 white
    kcolor = 1
    sq, dirs = DATA_BASE, DATA_BASE + cells * stride + 4096
    nx = dirs + 4096
    sched = [int(square[p + d] == kcolor) for p in positions for d in DIRS]
    lines = _padded(sq, stride, square) + _data_lines(dirs, DIRS) + _data_lines(nx, nxt)
    lines += [f".region r2 {sq:#x} {sq + cells * stride:#x}", f".region r3 {dirs:#x} {dirs + 32:#x}",
              f".region r4 {nx:#x} {nx + cells * 8:#x}"]
    if spec.placement == "hot":
        lines += _warmup(sq, sq + cells * stride)
    lines += [f"    MOVI r2, {sq:#x}", f"    MOVI r3, {dirs:#x}", f"    MOVI r4, {nx:#x}",
              "    MOVI r7, 8", f"    MOVI r9, {stride}", f"    MOVI r10, {kcolor}",
              f"    MOVI r11, {int(positions[0])}", f"    MOVI r12, {spec.generations}",
              ".do"] + _filler(spec.filler) + [
        ".loop r1, 0, 4 target=T end=E",
        "    MUL r5, r1, r7",          # dirs[k]
        "    ADD r5, r5, r3",
        "    LD r6, [r5+0]",
        "    ADD r5, r11, r6",        # ai = pos + dirs[k]
        "    MUL r5, r5, r9",
        "    ADD r5, r5, r2",
        "    LD r6, [r5+0]",         # m_square[ai]
        "    CMP_EQ r5, r6, r10",
        "T:",
        "    BNZ r5, Kill",
        "    ADDI r13, r13, 1",
        "    JMP Next",
        "Kill:",
        "    ADDI r14, r14, 1",
        "Next:",
        ".endloop",
        "E:",
        "    MUL r5, r11, r7",        # pos = m_next[pos]
        "    ADD r5, r5, r4",
        "    LD r11, [r5+0]",
        "    ADDI r12, r12, -1",
        ".while r12",
        "    HALT"]
    return lines, np.array(sched, dtype=np.uint8)


def _build_kill_or_connect(spec: WorkloadSpec):
    rng = np.random.default_rng(spec.seed)
    positions, cells, stride, nxt = _kill_common(spec, rng)
    groups = max(8, cells // 4)
    parent = rng.integers(0, groups, size=cells)
    libs = rng.integers(0, 4, size=groups)
    sq = DATA_BASE
    lb = sq + cells * stride + 4096
    dirs = lb + groups * stride + 4096
    nx = dirs + 4096
    sched = []
    for p in positions:
        killable = 0
        for d in DIRS:
            c = int(libs[parent[p + d]] <= 1)
            sched.append(c)
            if c:
                killable += 1
                if killable >= 2:
                    break
    lines = (_padded(sq, stride, parent) + _padded(lb, stride, libs) + _data_lines(dirs, DIRS)
             + _data_lines(nx, nxt))
    lines += [f".region r2 {sq:#x} {sq + cells * stride:#x}", f".region r3 {dirs:#x} {dirs + 32:#x}",
              f".region r4 {nx:#x} {nx + cells * 8:#x}", f".region r8 {lb:#x} {lb + groups * stride:#x}"]
    if spec.placement == "hot":
        lines += _warmup(sq, sq + cells * stride) + _warmup(lb, lb + groups * stride)
    lines += [f"    MOVI r2, {sq:#x}", f"    MOVI r3, {dirs:#x}", f"    MOVI r4, {nx:#x}",
              f"    MOVI r8, {lb:#x}", "    MOVI r7, 8", f"    MOVI r9, {stride}", "    MOVI r10, 1",
              f"    MOVI r11, {int(positions[0])}", f"    MOVI r12, {spec.generations}",
              ".do"] + _filler(spec.filler) + [
        "    MOVI r13, 0",
        ".loop r1, 0, 4 target=T end=E",
        "    MUL r5, r1, r7",
        "    ADD r5, r5, r3",
        "    LD r6, [r5+0]",
        "    ADD r5, r11, r6",
        "    MUL r5, r5, r9",
        "    ADD r5, r5, r2",
        "    LD r6, [r5+0]",         # par = m_parent[ai]
        "    MUL r6, r6, r9",
        "    ADD r6, r6, r8",
        "    LD r5, [r6+0]",         # libs = m_libs[par]
        "    CMP_LE r5, r5, r10",    # libs <= 1
        "T:",
        "    BZ r5, Next",
        "    ADDI r13, r13, 1",
        "    CMP_LE r6, r13, r10",     # stop once two kills are found
        "    BZ r6, @break",
        "Next:",
        ".endloop",
        "E:",
        "    MUL r5, r11, r7",
        "    ADD r5, r5, r4",
        "    LD r11, [r5+0]",
        "    ADDI r12, r12, -1",
        ".while r12",
        "    HALT"]
    # BZ is taken when libs > 1
    return lines, 1 - np.array(sched, dtype=np.uint8)


def _generation_loop(spec: WorkloadSpec, base: int, gen_bytes: int, body_loop: list[str], extra_pre=()):
    lines = [f"    MOVI r2, {base:#x}", "    MOVI r7, 8", f"    MOVI r9, {_stride(spec)}",
             f"    MOVI r12, {spec.generations}", ".do"]
    lines += list(extra_pre) + _filler(spec.filler) + body_loop
    lines += ["E:", f"    ADDI r2, r2, {gen_bytes}", "    ADDI r12, r12, -1", ".while r12", "    HALT"]
    return lines


def _stride(spec):
    return 8 if spec.placement == "hot" else LINE


def _build_synthetic(spec: WorkloadSpec):
    rng = np.random.default_rng(spec.seed)
    t, g, d = spec.trip, spec.generations, spec.chain_depth
    stride = _stride(spec)
    bits = (rng.random((g, t)) < spec.bias).astype(np.uint8)
    # level j holds indices into level j+1; the last level holds the outcome bits
    gen_bytes = d * t * stride
    words = np.zeros((g, d, t), dtype=np.int64)
    for gi in range(g):
        order = [np.arange(t)] + [rng.permutation(t) for _ in range(d - 1)]
        # walk forward: element k of level 0 leads to order[1][k] in level 1, ...
        for k in range(t):
            pos = k
            for j in range(d - 1):
                nxt = int(order[j + 1][k])
                words[gi, j, pos] = nxt
                pos = nxt
            words[gi, d - 1, pos] = bits[gi, k]
    total = g * gen_bytes
    lines = _padded(DATA_BASE, stride, words.reshape(-1))
    lines.append(f".region r2 {DATA_BASE:#x} {DATA_BASE + total:#x}")
    if spec.placement == "hot":
        lines += _warmup(DATA_BASE, DATA_BASE + total)
    loop = [f".loop r1, 0, {t} target=T end=E", "    MUL r5, r1, r9", "    ADD r5, r5, r2", "    LD r6, [r5+0]"]
    for j in range(1, d):
        loop += ["    MUL r6, r6, r9", f"    ADDI r6, r6, {j * t * stride}", "    ADD r6, r6, r2",
                 "    LD r6, [r6+0]"]
    loop += ["T:", "    BNZ r6, Taken", "    ADDI r16, r16, 1", "Taken:", ".endloop"]
    return lines + _generation_loop(spec, DATA_BASE, gen_bytes, loop), bits.reshape(-1)


def _build_record_replay(spec: WorkloadSpec):
    rng = np.random.default_rng(spec.seed)
    t, g = spec.trip, spec.generations
    stride = _stride(spec)
    bits = np.zeros((g, t), dtype=np.uint8)
    bits[0] = rng.integers(0, 2, size=t)
    flips = _flip_exact(rng, max(0, (g - 1) * t), spec.repeat_prob).reshape(max(0, g - 1), t)
    for gi in range(1, g):
        bits[gi] = bits[gi - 1] ^ flips[gi - 1]
    gen_bytes = t * stride
    lines = _padded(DATA_BASE, stride, bits.reshape(-1))
    lines.append(f".region r2 {DATA_BASE:#x} {DATA_BASE + g * gen_bytes:#x}")
    if spec.placement == "hot":
        lines += _warmup(DATA_BASE, DATA_BASE + g * gen_bytes)
    loop = [f".loop r1, 0, {t} target=T end=E", "    MUL r5, r1, r9", "    ADD r5, r5, r2", "    LD r6, [r5+0]",
            "T:", "    BNZ r6, Taken", "    ADDI r16, r16, 1", "Taken:", ".endloop"]
    return lines + _generation_loop(spec, DATA_BASE, gen_bytes, loop), bits.reshape(-1)


def _build_correlated(spec: WorkloadSpec):
    rng = np.random.default_rng(spec.seed)
    t, g = spec.trip, spec.generations
    stride = _stride(spec)
    src = rng.integers(0, 2, size=(g, t)).astype(np.uint8)
    mask = _flip_exact(rng, g * t, spec.corr_prob).reshape(g, t)
    tgt = src ^ mask
    # vertex[k] == pos for the source loop, edge data for the target loop
    gen_bytes = 2 * t * stride
    words = np.zeros((g, 2, t), dtype=np.int64)
    words[:, 0, :] = np.where(src == 1, 7, 3)
    words[:, 1, :] = np.where(tgt == 1, 7, 5)
    lines = _padded(DATA_BASE, stride, words.reshape(-1))
    lines.append(f".region r2 {DATA_BASE:#x} {DATA_BASE + g * gen_bytes:#x}")
    if spec.placement == "hot":
        lines += _warmup(DATA_BASE, DATA_BASE + g * gen_bytes)
    loops = [
        "    MOVI r10, 7",                                   # pos
        f".loop r1, 0, {t} target=S end=SE",
        "    MUL r5, r1, r9", "    ADD r5, r5, r2", "    LD r6, [r5+0]",
        "    CMP_EQ r6, r6, r10",
        "S:", "    BNZ r6, SrcYes", "    ADDI r16, r16, 1", "SrcYes:", ".endloop",
        "SE:"] + _filler(spec.filler) + [
        f".loop r1, 0, {t} target=T end=E",
        "    MUL r5, r1, r9", "    ADD r5, r5, r2", f"    LD r6, [r5+{t * stride}]",
        "    CMP_EQ r6, r6, r10",
        "T:", "    BNZ r6, TgtYes", "    ADDI r17, r17, 1", "TgtYes:", ".endloop"]
    lines += _generation_loop(spec, DATA_BASE, gen_bytes, loops)
    return lines, tgt.reshape(-1)


_BUILDERS = {"kill_neighbours": _build_kill_neighbours, "kill_or_connect": _build_kill_or_connect,
             "record_replay": _build_record_replay, "correlated": _build_correlated,
             "synthetic": _build_synthetic}


class ScheduleMismatch(AssertionError):
    pass


def build(spec: WorkloadSpec) -> Workload:
    """Program, target branch and its expected outcome schedule."""
    lines, schedule = _BUILDERS[spec.kind](spec)
    source = "\n".join(lines) + "\n"
    sp = parse_structured(source)
    loop = locate_target(sp, "T")[0]
    slices = {"T": extract_backslice(loop, sp.regions).loads}
    if spec.kind == "correlated":
        slices["S"] = extract_backslice(locate_target(sp, "S")[0], sp.regions).loads
    prog = lower_with_slices(sp, slices)
    pc = prog.labels["T"]
    trace = execute(prog)
    if not trace.halted:
        raise ScheduleMismatch(f"{spec.kind} workload did not halt ({trace.status})")
    got = branch_profile(trace, pc)
    if not np.array_equal(got, schedule):
        raise ScheduleMismatch(f"{spec.kind}: oracle profile disagrees with the generated schedule")
    return Workload(spec, source, sp, prog, "T", pc, schedule,
                    source_target="S" if spec.kind == "correlated" else None)


# --------------------------------------------------------------------------
# instrumentation that needs no pre-execute loop


def _b(op, dst=None, srcs=(), imm=None, target=None, width=None):
    return Instruction(op, dst, tuple(srcs), imm, target, width, tag=TAG)


def _free_regs(sp, n):
    used = registers_used(sp.body) | {30, 31}
    free = [r for r in range(1, 30) if r not in used]
    if len(free) < n:
        raise ValueError("not enough free registers")
    return free[:n]


def _insert_before_label(body, name, nodes):
    for i, n in enumerate(body):
        if isinstance(n, Label) and n.name == name:
            body[i:i] = nodes
            return
    raise ValueError(f"label {name!r} not in block")


def _outcome_byte(cond, out, zero):
    return [_b("CMP_EQ", out, (cond, zero)), _b("CMP_EQ", out, (out, zero))]


def build_record_replay_instrumentation(w: Workload, channel: int = 0) -> Program:
    """Record each instance's outcome as the hint for the same iteration of the next generation.

    The channel has no End PC, so one generation tag covers the whole run
    and slots are addressed by a running instance counter that starts one
    generation ahead of the consumer.
    """
    from .instrument import clone_program
    sp = clone_program(w.fresh_structured())
    loop, block, idx = locate_target(sp, w.target)
    cond = extract_backslice(loop, sp.regions).cond
    slot, mask, base, zero, addr, out, cfg, caddr = _free_regs(sp, 8)
    mmio: MmioLayout = sp.mmio
    sp.body[0:0] = [_b("MOVI", cfg, (), BossConfigImm(w.target, None)),
                    _b("MOVI", caddr, (), mmio.config_addr(channel)),
                    _b("ST", None, (caddr, cfg), 0),
                    _b("MOVI", slot, (), w.spec.trip), _b("MOVI", mask, (), 255),
                    _b("MOVI", base, (), mmio.outcome_addr(channel, 0)), _b("MOVI", zero, (), 0)]
    rec = [_b("AND", addr, (slot, mask)), _b("ADD", addr, (addr, base))] + _outcome_byte(cond, out, zero) + [
        _b("ST", None, (addr, out), 0), _b("ADDI", slot, (slot,), 1)]
    _insert_before_label(loop.body, w.target, rec)
    return lower_with_slices(sp, {w.target: extract_backslice(loop, sp.regions).loads})


def build_correlated_instrumentation(w: Workload, channel: int = 0) -> Program:
    """Feed the source loop's outcome for iteration k as the hint for the target loop's iteration k."""
    from .instrument import clone_program
    if w.source_target is None:
        raise ValueError("workload has no source branch")
    sp = clone_program(w.fresh_structured())
    src_loop = locate_target(sp, w.source_target)[0]
    cond = extract_backslice(src_loop, sp.regions).cond
    base, zero, addr, out, cfg, caddr = _free_regs(sp, 6)
    mmio = sp.mmio
    sp.body[0:0] = [_b("MOVI", cfg, (), BossConfigImm(w.target, w.end)),
                    _b("MOVI", caddr, (), mmio.config_addr(channel)),
                    _b("ST", None, (caddr, cfg), 0),
                    _b("MOVI", base, (), mmio.outcome_addr(channel, 0)), _b("MOVI", zero, (), 0)]
    rec = [_b("ADD", addr, (src_loop.induction, base))] + _outcome_byte(cond, out, zero) + [
        _b("ST", None, (addr, out), 0)]
    _insert_before_label(src_loop.body, w.source_target, rec)
    tgt_loop = locate_target(sp, w.target)[0]
    return lower_with_slices(sp, {w.target: extract_backslice(tgt_loop, sp.regions).loads,
                                  w.source_target: extract_backslice(src_loop, sp.regions).loads})


def with_filler(spec: WorkloadSpec, filler: int) -> WorkloadSpec:
    return dataclasses.replace(spec, filler=filler)
