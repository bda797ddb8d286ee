"""Toy register-machine IR, flat programs and the BOSS memory-mapped layout.

Instructions are immutable. Branch targets are kept as label names; the
owning :class:`Program` resolves them to instruction indices.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Union

NUM_REGS = 32
WORD = 8
VST_WIDTHS = (4, 8, 16)
END_NONE = 0xFFFFFFFF   # config word "no End PC"
BREAK = "@break"        # structured-form pseudo label: exit innermost loop

ALU3 = {"ADD", "SUB", "MUL", "CMP_EQ", "CMP_LE", "CMP_GE", "AND", "OR"}
CBRANCH = {"BNZ", "BZ"}
OPCODES = ALU3 | CBRANCH | {"ADDI", "MOVI", "MOV", "LD", "ST", "VST", "JMP", "HALT"}


def wrap64(value: int) -> int:
    """Wrap an integer to a signed 64-bit value."""
    return ((value + (1 << 63)) & 0xFFFFFFFFFFFFFFFF) - (1 << 63)


class AssemblyError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class BossConfigImm:
    """Symbolic MOVI immediate resolved at lowering time to a channel config word."""
    target: str
    end: Optional[str] = None

    def resolve(self, labels: dict[str, int]) -> int:
        end = labels[self.end] if self.end is not None else END_NONE
        return wrap64((end << 32) | labels[self.target])


@dataclass(frozen=True)
class Instruction:
    op: str
    dst: Optional[int] = None
    srcs: tuple[int, ...] = ()
    imm: Any = None
    target: Optional[str] = None
    width: Optional[int] = None
    # provenance marker for generated code; not part of identity
    tag: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.op not in OPCODES:
            raise ValueError(f"unknown opcode {self.op!r}")
        for r in ((self.dst,) if self.dst is not None else ()) + self.srcs:
            if not 0 <= r < NUM_REGS:
                raise ValueError(f"register r{r} out of range")
        if self.op == "VST" and self.width not in VST_WIDTHS:
            raise ValueError(f"VST width must be one of {VST_WIDTHS}")
        if self.op == "VST" and self.srcs[1] + self.width > NUM_REGS:
            raise ValueError("VST lane registers run past r31")

    # operand views -------------------------------------------------------
    @property
    def is_cond_branch(self) -> bool:
        return self.op in CBRANCH

    @property
    def is_branch(self) -> bool:
        return self.op in CBRANCH or self.op == "JMP"

    def reads(self) -> tuple[int, ...]:
        """Registers read (for VST, every lane register)."""
        if self.op == "VST":
            base, lane0 = self.srcs
            return (base,) + tuple(range(lane0, lane0 + self.width))
        return self.srcs

    def writes(self) -> Optional[int]:
        return self.dst

    def with_target(self, target: str) -> "Instruction":
        return Instruction(self.op, self.dst, self.srcs, self.imm, target, self.width, self.tag)

    def text(self) -> str:
        op, s = self.op, self.srcs
        if op in ALU3:
            return f"{op} r{self.dst}, r{s[0]}, r{s[1]}"
        if op == "ADDI":
            return f"ADDI r{self.dst}, r{s[0]}, {self.imm}"
        if op == "MOVI":
            return f"MOVI r{self.dst}, {self.imm}"
        if op == "MOV":
            return f"MOV r{self.dst}, r{s[0]}"
        if op == "LD":
            return f"LD r{self.dst}, {_mem(s[0], self.imm)}"
        if op == "ST":
            return f"ST {_mem(s[0], self.imm)}, r{s[1]}"
        if op == "VST":
            return f"VST {_mem(s[0], self.imm)}, r{s[1]}, {self.width}"
        if op in CBRANCH:
            return f"{op} r{s[0]}, {self.target}"
        if op == "JMP":
            return f"JMP {self.target}"
        return "HALT"


def _mem(base: int, imm: int) -> str:
    return f"[r{base}{'+' if imm >= 0 else '-'}{abs(imm)}]"


# --------------------------------------------------------------------------
# MMIO layout


@dataclass(frozen=True)
class MmioLayout:
    base: int = 0xB0550000
    channels: int = 4
    stride: int = 512
    config_offset: int = 0
    config_size: int = 8
    outcomes_offset: int = 256
    outcomes_size: int = 256

    @property
    def end(self) -> int:
        return self.base + self.channels * self.stride

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def config_addr(self, ch: int) -> int:
        return self.base + ch * self.stride + self.config_offset

    def outcome_addr(self, ch: int, iteration: int = 0) -> int:
        """Address software writes for dynamic instance ``iteration`` (rotates mod 256)."""
        return self.base + ch * self.stride + self.outcomes_offset + iteration % self.outcomes_size


@dataclass(frozen=True)
class NotMmio:
    pass


@dataclass(frozen=True)
class Config:
    channel: int
    offset: int = 0


@dataclass(frozen=True)
class Outcome:
    channel: int
    slot: int


class ReservedAddress(ValueError):
    pass


def mmio_decode(addr: int, layout: MmioLayout) -> Union[NotMmio, Config, Outcome]:
    if not layout.contains(addr):
        return NotMmio()
    ch, off = divmod(addr - layout.base, layout.stride)
    if layout.config_offset <= off < layout.config_offset + layout.config_size:
        return Config(ch, off - layout.config_offset)
    if layout.outcomes_offset <= off < layout.outcomes_offset + layout.outcomes_size:
        return Outcome(ch, off - layout.outcomes_offset)
    raise ReservedAddress(f"address {addr:#x} is in the reserved gap of channel {ch}")


# --------------------------------------------------------------------------
# Programs


def merge_segments(segments: Iterable[tuple[int, bytes]]) -> tuple[tuple[int, bytes], ...]:
    out: list[list] = []
    for addr, data in sorted(segments, key=lambda s: s[0]):
        data = bytes(data)
        if out and out[-1][0] + len(out[-1][1]) > addr:
            raise ValueError(f"overlapping .data at {addr:#x}")
        if out and out[-1][0] + len(out[-1][1]) == addr:
            out[-1][1] += data
        else:
            out.append([addr, bytearray(data)])
    return tuple((a, bytes(d)) for a, d in out)


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...]
    labels: dict[str, int]
    data: tuple[tuple[int, bytes], ...] = ()
    entry: int = 0
    mmio: MmioLayout = MmioLayout()
    # analysis metadata carried alongside the code; ignored by equality
    origin: tuple = field(default=(), compare=False)
    targets: dict[int, Optional[int]] = field(default_factory=dict, compare=False)
    slice_loads: dict[int, tuple[int, ...]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.instructions)
        object.__setattr__(self, "data", merge_segments(self.data))
        for name, idx in self.labels.items():
            if not 0 <= idx < n:
                raise ValueError(f"label {name!r} -> {idx} outside program")
        for pc, ins in enumerate(self.instructions):
            if ins.is_branch and ins.target not in self.labels:
                raise ValueError(f"pc {pc}: undefined label {ins.target!r}")
        for addr, seg in self.data:
            if addr < self.mmio.end and addr + len(seg) > self.mmio.base:
                raise ValueError("initial memory image overlaps the MMIO range")
        if n and not 0 <= self.entry < n:
            raise ValueError("entry outside program")

    def __hash__(self):
        return hash((self.instructions, self.entry, self.data))

    def __len__(self) -> int:
        return len(self.instructions)

    def dest(self, pc: int) -> int:
        return self.labels[self.instructions[pc].target]

    def label_of(self, pc: int) -> Optional[str]:
        names = sorted(n for n, i in self.labels.items() if i == pc)
        return names[0] if names else None


# --------------------------------------------------------------------------
# Assembly text

_REG = re.compile(r"^r(\d+)$")
_MEM = re.compile(r"^\[\s*r(\d+)\s*(?:([+-])\s*(0x[0-9a-fA-F]+|\d+))?\s*\]$")
_LABEL = re.compile(r"^([A-Za-z_.$@][\w.$@]*):$")


def parse_int(tok: str, line: Optional[int] = None) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AssemblyError(f"malformed immediate {tok!r}", line) from None


def parse_reg(tok: str, line: Optional[int] = None) -> int:
    m = _REG.match(tok.strip())
    if not m:
        raise AssemblyError(f"malformed register operand {tok!r}", line)
    r = int(m.group(1))
    if r >= NUM_REGS:
        raise AssemblyError(f"register r{r} out of range", line)
    return r


def _parse_mem(tok: str, line: int) -> tuple[int, int]:
    m = _MEM.match(tok.strip())
    if not m:
        raise AssemblyError(f"malformed memory operand {tok!r}", line)
    r = int(m.group(1))
    if r >= NUM_REGS:
        raise AssemblyError(f"register r{r} out of range", line)
    off = int(m.group(3), 0) if m.group(3) else 0
    return r, -off if m.group(2) == "-" else off


def _split_operands(rest: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def parse_instruction(text: str, line: Optional[int] = None) -> Instruction:
    parts = text.strip().split(None, 1)
    op = parts[0].upper()
    ops = _split_operands(parts[1]) if len(parts) > 1 else []
    if op not in OPCODES:
        raise AssemblyError(f"unknown opcode {parts[0]!r}", line)

    def need(n):
        if len(ops) != n:
            raise AssemblyError(f"{op} expects {n} operands, got {len(ops)}", line)

    try:
        if op in ALU3:
            need(3)
            return Instruction(op, parse_reg(ops[0], line), (parse_reg(ops[1], line), parse_reg(ops[2], line)))
        if op == "ADDI":
            need(3)
            return Instruction(op, parse_reg(ops[0], line), (parse_reg(ops[1], line),), parse_int(ops[2], line))
        if op == "MOVI":
            need(2)
            return Instruction(op, parse_reg(ops[0], line), (), parse_int(ops[1], line))
        if op == "MOV":
            need(2)
            return Instruction(op, parse_reg(ops[0], line), (parse_reg(ops[1], line),))
        if op == "LD":
            need(2)
            base, off = _parse_mem(ops[1], line)
            return Instruction(op, parse_reg(ops[0], line), (base,), off)
        if op == "ST":
            need(2)
            base, off = _parse_mem(ops[0], line)
            return Instruction(op, None, (base, parse_reg(ops[1], line)), off)
        if op == "VST":
            need(3)
            base, off = _parse_mem(ops[0], line)
            return Instruction(op, None, (base, parse_reg(ops[1], line)), off, width=parse_int(ops[2], line))
        if op in CBRANCH:
            need(2)
            return Instruction(op, None, (parse_reg(ops[0], line),), target=ops[1])
        if op == "JMP":
            need(1)
            return Instruction(op, target=ops[0])
        need(0)
        return Instruction("HALT")
    except ValueError as exc:
        if isinstance(exc, AssemblyError):
            raise
        raise AssemblyError(str(exc), line) from None


def strip_comment(line: str) -> str:
    for marker in ("#", ";"):
        i = line.find(marker)
        if i >= 0:
            line = line[:i]
    return line.strip()


def assemble(text: str) -> Program:
    """Assemble source text (flat or with structured loop directives) into a Program."""
    from .structured import lower, parse_structured

    return lower(parse_structured(text))


def disassemble(program: Program) -> str:
    lines = [f".mmio_base {program.mmio.base:#x}"]
    for addr, seg in program.data:
        for i in range(0, len(seg), 32):
            chunk = seg[i:i + 32]
            lines.append(f".data {addr + i:#x} " + " ".join(str(b) for b in chunk))
    if program.entry != 0:
        entry_label = program.label_of(program.entry)
        if entry_label is None:
            raise ValueError("entry point has no label to name it by")
        lines.append(f".entry {entry_label}")
    for t, e in sorted(program.targets.items()):
        names = [program.label_of(t), program.label_of(e) if e is not None else ""]
        if names[0] is not None and names[1] is not None:
            lines.append((".target " + " ".join(names)).rstrip())
    by_pc: dict[int, list[str]] = {}
    for name, idx in program.labels.items():
        by_pc.setdefault(idx, []).append(name)
    for pc, ins in enumerate(program.instructions):
        for name in sorted(by_pc.get(pc, ())):
            lines.append(f"{name}:")
        lines.append("    " + ins.text())
    return "\n".join(lines) + "\n"
