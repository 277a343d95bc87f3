"""Text assembler and disassembler.

One instruction per line::

    mov r0, 42          ; 64-bit ALU, imm
    add32 r1, r2        ; 32-bit ALU, reg
    be16 r3             ; byte swap
    ldxdw r0, [r1+8]
    stxw [r10-4], r1
    stb [r10-1], 7
    lddw r2, 0x1122334455667788
    jge r1, 8, done     ; label or +N / -N slot offset
    jne32 r1, r2, +3
    call 5              ; helper id or helper name
    exit

``#`` and ``;`` start comments; ``name:`` defines a label.
"""

from __future__ import annotations

import re

from .isa import (
    ALU, ALU64, ALU_NAMES, ALU_OPS, B, DW, H, JMP, JMP32, JMP_NAMES, JMP_OPS, K, LDX, MEM,
    OP_CALL, OP_EXIT, OP_JA, OP_LDDW, SIZE_BYTES, ST, STX, W, X, Instruction, Program,
)

SIZE_SUFFIX = {"b": B, "h": H, "w": W, "dw": DW}
SUFFIX_OF_SIZE = {v: k for k, v in SIZE_SUFFIX.items()}

HELPER_NAMES = {
    "block_read": 1,
    "block_write": 2,
    "packet_len": 3,
    "emit": 4,
    "time_now_ns": 5,
    "kv_route": 6,
}

_MEM_RE = re.compile(r"^\[\s*r(\d+)\s*(?:([+-])\s*(\w+))?\s*\]$")
_LABEL_RE = re.compile(r"^([A-Za-z_.][\w.]*):$")


class AssemblyError(ValueError):
    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


def _reg(tok: str, line: int) -> int:
    tok = tok.strip()
    if not re.fullmatch(r"r\d+", tok) or int(tok[1:]) > 10:
        raise AssemblyError(f"bad register {tok!r}", line)
    return int(tok[1:])


def _int(tok: str, line: int) -> int:
    try:
        return int(tok.strip(), 0)
    except ValueError:
        raise AssemblyError(f"bad integer {tok!r}", line) from None


def _imm32(value: int, line: int) -> int:
    if not -(2**31) <= value < 2**32:
        raise AssemblyError(f"immediate {value} does not fit 32 bits", line)
    return value - 2**32 if value >= 2**31 else value


def _mem(tok: str, line: int) -> tuple[int, int]:
    m = _MEM_RE.match(tok.strip())
    if not m:
        raise AssemblyError(f"bad memory operand {tok!r}", line)
    reg = int(m.group(1))
    off = 0
    if m.group(3):
        off = _int(m.group(3), line)
        if m.group(2) == "-":
            off = -off
    if not -(2**15) <= off < 2**15:
        raise AssemblyError("memory offset does not fit 16 bits", line)
    return reg, off


def _split(rest: str) -> list[str]:
    # commas inside [] never occur, so a plain split is enough
    return [p.strip() for p in rest.split(",")] if rest.strip() else []


def assemble(text: str, name: str = "prog", section: str = "datapath") -> Program:
    lines: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        code = re.split(r"[#;]", raw, maxsplit=1)[0].strip()
        if code:
            lines.append((lineno, code))

    # first pass: label addresses in slots
    labels: dict[str, int] = {}
    pc = 0
    for lineno, code in lines:
        m = _LABEL_RE.match(code)
        if m:
            if m.group(1) in labels:
                raise AssemblyError(f"duplicate label {m.group(1)!r}", lineno)
            labels[m.group(1)] = pc
            continue
        pc += 2 if code.split()[0].lower() == "lddw" else 1

    out: list[Instruction] = []
    for lineno, code in lines:
        if _LABEL_RE.match(code):
            continue
        mnemonic, _, rest = code.partition(" ")
        mnemonic = mnemonic.lower()
        args = _split(rest)
        out.extend(_assemble_one(mnemonic, args, len(out), labels, lineno))
    return Program(tuple(out), name, section)


def _target(tok: str, pc: int, labels: dict[str, int], line: int) -> int:
    tok = tok.strip()
    if tok in labels:
        off = labels[tok] - pc - 1
    elif re.fullmatch(r"[+-]\d+", tok):
        off = int(tok)
    else:
        raise AssemblyError(f"unknown jump target {tok!r}", line)
    if not -(2**15) <= off < 2**15:
        raise AssemblyError("jump offset does not fit 16 bits", line)
    return off


def _assemble_one(mnemonic, args, pc, labels, line) -> list[Instruction]:
    def want(n):
        if len(args) != n:
            raise AssemblyError(f"{mnemonic} takes {n} operand(s)", line)

    if mnemonic == "exit":
        want(0)
        return [Instruction(OP_EXIT)]
    if mnemonic == "call":
        want(1)
        tok = args[0]
        helper = HELPER_NAMES.get(tok)
        return [Instruction(OP_CALL, imm=helper if helper is not None else _int(tok, line))]
    if mnemonic == "ja":
        want(1)
        return [Instruction(OP_JA, off=_target(args[0], pc, labels, line))]
    if mnemonic == "lddw":
        want(2)
        value = _int(args[1], line) & (2**64 - 1)
        lo, hi = value & 0xFFFFFFFF, value >> 32
        return [
            Instruction(OP_LDDW, _reg(args[0], line), 0, 0, _imm32(lo, line)),
            Instruction(0, 0, 0, 0, _imm32(hi, line)),
        ]
    if mnemonic.startswith("ldx") and mnemonic[3:] in SIZE_SUFFIX:
        want(2)
        src, off = _mem(args[1], line)
        return [Instruction(LDX | MEM | SIZE_SUFFIX[mnemonic[3:]], _reg(args[0], line), src, off, 0)]
    if mnemonic.startswith("stx") and mnemonic[3:] in SIZE_SUFFIX:
        want(2)
        dst, off = _mem(args[0], line)
        return [Instruction(STX | MEM | SIZE_SUFFIX[mnemonic[3:]], dst, _reg(args[1], line), off, 0)]
    if mnemonic.startswith("st") and mnemonic[2:] in SIZE_SUFFIX:
        want(2)
        dst, off = _mem(args[0], line)
        return [Instruction(ST | MEM | SIZE_SUFFIX[mnemonic[2:]], dst, 0, off, _imm32(_int(args[1], line), line))]
    m = re.fullmatch(r"(le|be)(16|32|64)", mnemonic)
    if m:
        want(1)
        src = X if m.group(1) == "be" else K
        return [Instruction(ALU | ALU_OPS["end"] | src, _reg(args[0], line), 0, 0, int(m.group(2)))]

    base, wide = mnemonic, True
    if base.endswith("32"):
        base, wide = base[:-2], False
    elif base.endswith("64"):
        base = base[:-2]

    if base in ALU_OPS and base != "end":
        cls = ALU64 if wide else ALU
        if base == "neg":
            want(1)
            return [Instruction(cls | ALU_OPS["neg"], _reg(args[0], line))]
        want(2)
        dst = _reg(args[0], line)
        if args[1].startswith("r") and args[1][1:].isdigit():
            return [Instruction(cls | ALU_OPS[base] | X, dst, _reg(args[1], line))]
        return [Instruction(cls | ALU_OPS[base] | K, dst, 0, 0, _imm32(_int(args[1], line), line))]
    if base in JMP_OPS and base not in ("ja", "call", "exit"):
        cls = JMP if wide else JMP32
        want(3)
        dst = _reg(args[0], line)
        off = _target(args[2], pc, labels, line)
        if args[1].startswith("r") and args[1][1:].isdigit():
            return [Instruction(cls | JMP_OPS[base] | X, dst, _reg(args[1], line), off)]
        return [Instruction(cls | JMP_OPS[base] | K, dst, 0, off, _imm32(_int(args[1], line), line))]
    raise AssemblyError(f"unknown mnemonic {mnemonic!r}", line)


def _fmt_mem(reg: int, off: int) -> str:
    if off == 0:
        return f"[r{reg}]"
    return f"[r{reg}{'+' if off > 0 else '-'}{abs(off)}]"


def disassemble_one(insn: Instruction, next_insn: Instruction | None = None) -> str:
    op, cls = insn.opcode, insn.opcode & 0x07
    if op == OP_LDDW:
        hi = next_insn.imm & 0xFFFFFFFF if next_insn is not None else 0
        return f"lddw r{insn.dst}, {hex((hi << 32) | (insn.imm & 0xFFFFFFFF))}"
    if op == OP_EXIT:
        return "exit"
    if op == OP_CALL:
        return f"call {insn.imm}"
    if op == OP_JA:
        return f"ja {insn.off:+d}"
    if cls in (ALU, ALU64):
        code = op & 0xF0
        name = ALU_NAMES[code]
        if name == "end":
            return f"{'be' if op & X else 'le'}{insn.imm} r{insn.dst}"
        suffix = "" if cls == ALU64 else "32"
        if name == "neg":
            return f"neg{suffix} r{insn.dst}"
        operand = f"r{insn.src}" if op & X else str(insn.imm)
        return f"{name}{suffix} r{insn.dst}, {operand}"
    if cls in (JMP, JMP32):
        name = JMP_NAMES[op & 0xF0] + ("" if cls == JMP else "32")
        operand = f"r{insn.src}" if op & X else str(insn.imm)
        return f"{name} r{insn.dst}, {operand}, {insn.off:+d}"
    size = SUFFIX_OF_SIZE[op & 0x18]
    if cls == LDX:
        return f"ldx{size} r{insn.dst}, {_fmt_mem(insn.src, insn.off)}"
    if cls == STX:
        return f"stx{size} {_fmt_mem(insn.dst, insn.off)}, r{insn.src}"
    if cls == ST:
        return f"st{size} {_fmt_mem(insn.dst, insn.off)}, {insn.imm}"
    raise ValueError(f"cannot disassemble opcode {op:#04x}")


def disassemble(program: Program) -> str:
    lines = []
    insns = program.instructions
    pc = 0
    while pc < len(insns):
        insn = insns[pc]
        nxt = insns[pc + 1] if pc + 1 < len(insns) else None
        lines.append(disassemble_one(insn, nxt))
        pc += 2 if insn.opcode == OP_LDDW else 1
    return "\n".join(lines) + "\n"


__all__ = ["assemble", "disassemble", "disassemble_one", "AssemblyError", "HELPER_NAMES", "SIZE_BYTES"]
