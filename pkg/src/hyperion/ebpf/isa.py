"""Instruction encoding for the supported eBPF subset.

Each slot is 8 bytes, little-endian: opcode u8, regs u8 (dst low nibble,
src high nibble), off i16, imm i32.  ``lddw`` (LD_IMM64) spans two slots;
the second slot carries the upper 32 bits of the constant in its imm field
and has every other field zero.  Jump offsets and instruction indices count
slots, as in the kernel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

# instruction classes
LD, LDX, ST, STX, ALU, JMP, JMP32, ALU64 = range(8)

# size field
W, H, B, DW = 0x00, 0x08, 0x10, 0x18
SIZE_BYTES = {W: 4, H: 2, B: 1, DW: 8}

# mode field
IMM, MEM = 0x00, 0x60

# source bit
K, X = 0x00, 0x08

ALU_OPS = {
    "add": 0x00, "sub": 0x10, "mul": 0x20, "div": 0x30, "or": 0x40, "and": 0x50,
    "lsh": 0x60, "rsh": 0x70, "neg": 0x80, "mod": 0x90, "xor": 0xA0, "mov": 0xB0,
    "arsh": 0xC0, "end": 0xD0,
}
JMP_OPS = {
    "ja": 0x00, "jeq": 0x10, "jgt": 0x20, "jge": 0x30, "jset": 0x40, "jne": 0x50,
    "jsgt": 0x60, "jsge": 0x70, "call": 0x80, "exit": 0x90, "jlt": 0xA0, "jle": 0xB0,
    "jslt": 0xC0, "jsle": 0xD0,
}
ALU_NAMES = {v: k for k, v in ALU_OPS.items()}
JMP_NAMES = {v: k for k, v in JMP_OPS.items()}
COND_JMP_OPS = frozenset(JMP_OPS[n] for n in JMP_OPS if n not in ("ja", "call", "exit"))

OP_LDDW = LD | IMM | DW  # 0x18
OP_CALL = JMP | JMP_OPS["call"]  # 0x85
OP_EXIT = JMP | JMP_OPS["exit"]  # 0x95
OP_JA = JMP | JMP_OPS["ja"]  # 0x05

STACK_SIZE = 512
FRAME_REG = 10

_SLOT = struct.Struct("<BBhi")


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class MalformedEncoding(DecodeError):
    pass


class UnknownOpcode(DecodeError):
    pass


class TruncatedWideInstruction(DecodeError):
    pass


class Instruction(NamedTuple):
    opcode: int
    dst: int = 0
    src: int = 0
    off: int = 0
    imm: int = 0

    @property
    def cls(self) -> int:
        return self.opcode & 0x07


def _valid_opcodes() -> frozenset[int]:
    ops = {OP_LDDW}
    for cls in (ALU, ALU64):
        for name, code in ALU_OPS.items():
            if name == "neg":
                ops.add(cls | code | K)
            elif name == "end":
                if cls == ALU:
                    ops.update({cls | code | K, cls | code | X})
            else:
                ops.update({cls | code | K, cls | code | X})
    for code in COND_JMP_OPS:
        for cls in (JMP, JMP32):
            ops.update({cls | code | K, cls | code | X})
    ops.update({OP_JA, OP_CALL, OP_EXIT})
    for size in SIZE_BYTES:
        ops.add(LDX | MEM | size)
        ops.add(STX | MEM | size)
        ops.add(ST | MEM | size)
    return frozenset(ops)


VALID_OPCODES = _valid_opcodes()


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...]
    name: str = "prog"
    section: str = "datapath"

    def __post_init__(self) -> None:
        if not self.instructions:
            raise ValueError("a program needs at least one instruction")
        if self.section not in ("datapath", "init"):
            raise ValueError(f"unknown section {self.section!r}")

    def __len__(self) -> int:
        return len(self.instructions)

    def encode(self) -> bytes:
        return encode(self.instructions)


def encode(instructions) -> bytes:
    out = bytearray()
    for insn in instructions:
        out += _SLOT.pack(insn.opcode, (insn.src << 4) | insn.dst, insn.off, insn.imm)
    return bytes(out)


def _check_slot(insn: Instruction, offset: int) -> None:
    if insn.opcode not in VALID_OPCODES:
        raise UnknownOpcode(f"unknown opcode {insn.opcode:#04x}", offset)
    if insn.dst > 10 or insn.src > 10:
        raise MalformedEncoding("register number out of range", offset)
    cls = insn.cls
    op = insn.opcode & 0xF0
    if cls in (ALU, ALU64) and op == ALU_OPS["end"] and insn.imm not in (16, 32, 64):
        raise MalformedEncoding("byte swap width must be 16, 32 or 64", offset)
    if cls in (ALU, ALU64) and op == ALU_OPS["neg"] and insn.src:
        raise MalformedEncoding("neg takes no source register", offset)


def decode(image: bytes, name: str = "prog", section: str = "datapath") -> Program:
    """Decode a raw bytecode image (``load``)."""
    image = bytes(image)
    if len(image) == 0 or len(image) % 8:
        raise MalformedEncoding(f"image length {len(image)} is not a positive multiple of 8", len(image))
    slots = [Instruction(op, regs & 0x0F, regs >> 4, off, imm) for op, regs, off, imm in _SLOT.iter_unpack(image)]
    pc = 0
    while pc < len(slots):
        insn = slots[pc]
        _check_slot(insn, pc * 8)
        if insn.opcode == OP_LDDW:
            if insn.src:
                raise MalformedEncoding("pseudo lddw sources are not supported", pc * 8)
            if pc + 1 >= len(slots):
                raise TruncatedWideInstruction("lddw missing its second slot", pc * 8)
            hi = slots[pc + 1]
            if hi.opcode or hi.dst or hi.src or hi.off:
                raise MalformedEncoding("lddw second slot must be zero apart from imm", (pc + 1) * 8)
            pc += 2
        else:
            pc += 1
    return Program(tuple(slots), name, section)


load = decode


def lddw_value(program: Program, pc: int) -> int:
    lo = program.instructions[pc].imm & 0xFFFFFFFF
    hi = program.instructions[pc + 1].imm & 0xFFFFFFFF
    return (hi << 32) | lo


def is_wide(insn: Instruction) -> bool:
    return insn.opcode == OP_LDDW
