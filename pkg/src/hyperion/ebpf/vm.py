"""Interpreter.

Address space seen by programs::

    PACKET_BASE .. +len(packet)      request payload, r1 at entry
    WINDOW_BASE .. +4096             block window for block_read/block_write, r2 at entry
    STACK_TOP-512 .. STACK_TOP       stack, r10 = STACK_TOP

Every instruction costs one unit of fuel.  Helper hooks that perform block
I/O return generators; :func:`run` forwards whatever they yield to its
driver, which resumes it with the completed command.
"""

from __future__ import annotations

import enum
import types
from dataclasses import dataclass, field
from typing import Callable, Generator

from . import isa
from .helpers import (
    EMIT, PACKET_LEN, STANDARD_SIGNATURES, TIME_NOW_NS, HelperSignature, HelperTable,
)
from .isa import ALU, ALU64, JMP, JMP32, LDX, ST, STACK_SIZE, STX
from .verifier import MAX_PACKET, WINDOW_SIZE, VerifiedProgram

PACKET_BASE = 0x0000_0100_0000_0000
WINDOW_BASE = 0x0000_0200_0000_0000
STACK_TOP = 0x0000_0300_0000_0000

U64 = (1 << 64) - 1
U32 = (1 << 32) - 1
DEFAULT_FUEL = 1 << 20


class TrapCode(enum.IntEnum):
    FUEL_EXHAUSTED = 1
    DIVIDE_BY_ZERO = 2
    BAD_HELPER_RETURN = 3
    ISOLATION_FAULT = 4
    OUT_OF_BOUNDS = 5
    UNKNOWN_HELPER = 6


class Trap(Exception):
    def __init__(self, code: TrapCode, detail: str = "") -> None:
        super().__init__(f"{code.name}: {detail}" if detail else code.name)
        self.code = code
        self.detail = detail


@dataclass
class ExecutionContext:
    """Single-use per-execution state."""

    packet: bytes = b""
    helpers: HelperTable = field(default_factory=dict)
    fuel: int = DEFAULT_FUEL
    now_ns: Callable[[], int] = lambda: 0
    max_emit: int = MAX_PACKET

    def __post_init__(self) -> None:
        if len(self.packet) > MAX_PACKET:
            raise ValueError(f"packet longer than {MAX_PACKET} bytes")
        self.packet = bytearray(self.packet)
        self.stack = bytearray(STACK_SIZE)
        self.window = bytearray(WINDOW_SIZE)
        self.emitted = bytearray()

    def _locate(self, addr: int, size: int) -> tuple[bytearray, int]:
        if PACKET_BASE <= addr and addr + size <= PACKET_BASE + len(self.packet):
            return self.packet, addr - PACKET_BASE
        if WINDOW_BASE <= addr and addr + size <= WINDOW_BASE + WINDOW_SIZE:
            return self.window, addr - WINDOW_BASE
        if STACK_TOP - STACK_SIZE <= addr and addr + size <= STACK_TOP:
            return self.stack, addr - (STACK_TOP - STACK_SIZE)
        raise Trap(TrapCode.OUT_OF_BOUNDS, f"{size}-byte access at {addr:#x}")

    def read_mem(self, addr: int, size: int) -> bytes:
        buf, off = self._locate(addr, size)
        return bytes(buf[off:off + size])

    def write_mem(self, addr: int, data: bytes) -> None:
        buf, off = self._locate(addr, len(data))
        buf[off:off + len(data)] = data


@dataclass(frozen=True)
class ExecResult:
    return_value: int | None
    trap: TrapCode | None
    fuel_used: int
    emitted: bytes = b""
    trap_detail: str = ""


def _emit(ctx: ExecutionContext, ptr, size, *_):
    if size > MAX_PACKET or len(ctx.emitted) + size > ctx.max_emit:
        return U64  # -1: response buffer full
    ctx.emitted += ctx.read_mem(ptr, size)
    return 0


def base_helpers() -> dict[int, tuple[HelperSignature, Callable]]:
    """Helpers that need no storage: packet_len, emit, time_now_ns."""
    return {
        PACKET_LEN: (STANDARD_SIGNATURES[PACKET_LEN], lambda ctx, *_: len(ctx.packet)),
        EMIT: (STANDARD_SIGNATURES[EMIT], _emit),
        TIME_NOW_NS: (STANDARD_SIGNATURES[TIME_NOW_NS], lambda ctx, *_: ctx.now_ns()),
    }


def _signed(value: int, bits: int) -> int:
    return value - (1 << bits) if value >> (bits - 1) else value


def _decode(vp: VerifiedProgram) -> list:
    cached = getattr(vp, "_decoded", None)
    if cached is not None:
        return cached
    prog = vp.program
    out = []
    for pc, insn in enumerate(prog.instructions):
        extra = isa.lddw_value(prog, pc) if insn.opcode == isa.OP_LDDW else 0
        out.append((insn.opcode, insn.dst, insn.src, insn.off, insn.imm, extra))
    object.__setattr__(vp, "_decoded", out)
    return out


_ADD, _SUB, _MUL, _DIV, _OR, _AND, _LSH, _RSH, _NEG, _MOD, _XOR, _MOV, _ARSH, _END = (
    0x00, 0x10, 0x20, 0x30, 0x40, 0x50, 0x60, 0x70, 0x80, 0x90, 0xA0, 0xB0, 0xC0, 0xD0,
)


def run(vp: VerifiedProgram, ctx: ExecutionContext) -> Generator[object, object, ExecResult]:
    """Execute as a generator; yields whatever helper hooks yield."""
    code = _decode(vp)
    regs = [0] * 11
    regs[1] = PACKET_BASE
    regs[2] = WINDOW_BASE
    regs[10] = STACK_TOP
    helpers = ctx.helpers
    fuel = ctx.fuel
    used = 0
    pc = 0
    try:
        while True:
            if used >= fuel:
                raise Trap(TrapCode.FUEL_EXHAUSTED, f"after {used} instructions")
            used += 1
            op, dst, src, off, imm, extra = code[pc]
            cls = op & 0x07
            if cls == ALU64:
                a = regs[dst]
                b = regs[src] if op & 0x08 else imm & U64
                alu = op & 0xF0
                if alu == _MOV:
                    r = b
                elif alu == _ADD:
                    r = a + b
                elif alu == _SUB:
                    r = a - b
                elif alu == _MUL:
                    r = a * b
                elif alu == _DIV:
                    if b == 0:
                        raise Trap(TrapCode.DIVIDE_BY_ZERO, f"insn {pc}")
                    r = a // b
                elif alu == _MOD:
                    if b == 0:
                        raise Trap(TrapCode.DIVIDE_BY_ZERO, f"insn {pc}")
                    r = a % b
                elif alu == _OR:
                    r = a | b
                elif alu == _AND:
                    r = a & b
                elif alu == _XOR:
                    r = a ^ b
                elif alu == _LSH:
                    r = a << (b & 63)
                elif alu == _RSH:
                    r = a >> (b & 63)
                elif alu == _ARSH:
                    r = _signed(a, 64) >> (b & 63)
                elif alu == _NEG:
                    r = -a
                else:
                    raise Trap(TrapCode.OUT_OF_BOUNDS, f"bad alu64 opcode {op:#x}")
                regs[dst] = r & U64
                pc += 1
            elif cls == JMP or cls == JMP32:
                jop = op & 0xF0
                if op == isa.OP_EXIT:
                    return ExecResult(regs[0], None, used, bytes(ctx.emitted))
                if op == isa.OP_CALL:
                    entry = helpers.get(imm)
                    if entry is None:
                        raise Trap(TrapCode.UNKNOWN_HELPER, f"helper {imm}")
                    result = entry[1](ctx, regs[1], regs[2], regs[3], regs[4], regs[5])
                    if isinstance(result, types.GeneratorType):
                        result = yield from result
                    if not isinstance(result, int) or not -(1 << 63) <= result <= U64:
                        raise Trap(TrapCode.BAD_HELPER_RETURN, f"helper {imm} returned {result!r}")
                    regs[0] = result & U64
                    regs[1] = regs[2] = regs[3] = regs[4] = regs[5] = 0
                    pc += 1
                    continue
                if op == isa.OP_JA:
                    pc += 1 + off
                    continue
                a = regs[dst]
                b = regs[src] if op & 0x08 else imm & U64
                if cls == JMP32:
                    a &= U32
                    b &= U32
                    bits = 32
                else:
                    bits = 64
                if jop == 0x10:
                    taken = a == b
                elif jop == 0x50:
                    taken = a != b
                elif jop == 0x20:
                    taken = a > b
                elif jop == 0x30:
                    taken = a >= b
                elif jop == 0xA0:
                    taken = a < b
                elif jop == 0xB0:
                    taken = a <= b
                elif jop == 0x40:
                    taken = (a & b) != 0
                else:
                    sa, sb = _signed(a, bits), _signed(b, bits)
                    if jop == 0x60:
                        taken = sa > sb
                    elif jop == 0x70:
                        taken = sa >= sb
                    elif jop == 0xC0:
                        taken = sa < sb
                    else:
                        taken = sa <= sb
                pc += 1 + off if taken else 1
            elif cls == LDX:
                size = isa.SIZE_BYTES[op & 0x18]
                buf, pos = ctx._locate((regs[src] + off) & U64, size)
                regs[dst] = int.from_bytes(buf[pos:pos + size], "little")
                pc += 1
            elif cls == STX or cls == ST:
                size = isa.SIZE_BYTES[op & 0x18]
                value = regs[src] if cls == STX else imm & U64
                buf, pos = ctx._locate((regs[dst] + off) & U64, size)
                buf[pos:pos + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
                pc += 1
            elif cls == ALU:
                a = regs[dst] & U32
                b = (regs[src] if op & 0x08 else imm) & U32
                alu = op & 0xF0
                if alu == _MOV:
                    r = b
                elif alu == _ADD:
                    r = a + b
                elif alu == _SUB:
                    r = a - b
                elif alu == _MUL:
                    r = a * b
                elif alu == _DIV:
                    if b == 0:
                        raise Trap(TrapCode.DIVIDE_BY_ZERO, f"insn {pc}")
                    r = a // b
                elif alu == _MOD:
                    if b == 0:
                        raise Trap(TrapCode.DIVIDE_BY_ZERO, f"insn {pc}")
                    r = a % b
                elif alu == _OR:
                    r = a | b
                elif alu == _AND:
                    r = a & b
                elif alu == _XOR:
                    r = a ^ b
                elif alu == _LSH:
                    r = a << (b & 31)
                elif alu == _RSH:
                    r = a >> (b & 31)
                elif alu == _ARSH:
                    r = _signed(a, 32) >> (b & 31)
                elif alu == _NEG:
                    r = -a
                else:  # byte swap
                    width = imm
                    v = regs[dst] & ((1 << width) - 1)
                    if op & 0x08:
                        v = int.from_bytes(v.to_bytes(width // 8, "little"), "big")
                    regs[dst] = v
                    pc += 1
                    continue
                regs[dst] = r & U32
                pc += 1
            elif op == isa.OP_LDDW:
                regs[dst] = extra
                pc += 2
            else:
                raise Trap(TrapCode.OUT_OF_BOUNDS, f"bad opcode {op:#x}")
    except Trap as trap:
        return ExecResult(None, trap.code, used, bytes(ctx.emitted), trap.detail)


def execute(
    vp: VerifiedProgram,
    ctx: ExecutionContext,
    io: Callable[[object], object] | None = None,
) -> ExecResult:
    """Run to EXIT or trap.  ``io`` services block commands synchronously."""
    missing = vp.accessed_helper_ids - set(ctx.helpers)
    if missing:
        raise ValueError(f"helper table lacks ids {sorted(missing)}")
    gen = run(vp, ctx)
    try:
        request = next(gen)
        while True:
            if io is None:
                raise RuntimeError("program performed block I/O but no io driver was given")
            try:
                reply = io(request)
            except Trap as trap:
                request = gen.throw(trap)
            else:
                request = gen.send(reply)
    except StopIteration as stop:
        return stop.value
