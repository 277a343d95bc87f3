"""Static verifier.

Abstract interpretation over register states.  Every path is explored;
loops are handled by unrolling, so a loop passes only if its counter is
decided by the abstract state on every iteration.  A state that repeats on
its own path is an unbounded loop.  Exploration is capped at
``max_unrolled`` derived states, and the longest explored path gives the
static instruction bound.

Abstract values are plain tuples so states hash cheaply:

``None``                                uninitialized
``("s", lo, hi, pktlen, slack)``        scalar in [lo, hi] (unsigned)
``("p", region, lo, hi, slack)``        pointer into stack/packet/window

``pktlen`` marks the packet length value.  ``slack`` is k such that
value + k <= packet length, learned from a compare against the length; for
packet pointers it bounds the pointer offset the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from . import isa
from .helpers import STANDARD_SIGNATURES, HelperSignature
from .isa import (
    ALU, ALU64, JMP, JMP32, JMP_OPS, LDX, OP_CALL, OP_EXIT, OP_JA, OP_LDDW,
    SIZE_BYTES, ST, STACK_SIZE, STX, X, Instruction, Program,
)

U64 = (1 << 64) - 1
U32 = (1 << 32) - 1
MAX_PACKET = 8192
WINDOW_SIZE = 4096

UNKNOWN = ("s", 0, U64, False, None)
UNKNOWN32 = ("s", 0, U32, False, None)


def const(value: int) -> tuple:
    value &= U64
    return ("s", value, value, False, None)


def scalar(lo: int, hi: int) -> tuple:
    return ("s", lo, hi, False, None)


class VerifierError(Exception):
    code = "VerifierError"

    def __init__(self, message: str, pc: int | None = None) -> None:
        where = f" (insn {pc})" if pc is not None else ""
        super().__init__(f"{self.code}: {message}{where}")
        self.pc = pc
        self.detail = message


class UninitializedRegister(VerifierError):
    code = "UninitializedRegister"


class UnboundedLoop(VerifierError):
    code = "UnboundedLoop"


class OutOfBoundsAccess(VerifierError):
    code = "OutOfBoundsAccess"


class UnknownHelper(VerifierError):
    code = "UnknownHelper"


class TooLarge(VerifierError):
    code = "TooLarge"


class InvalidInstruction(VerifierError):
    code = "InvalidInstruction"


@dataclass(frozen=True)
class VerifierLimits:
    max_insns: int = 4096
    max_unrolled: int = 65536


_ISSUED = object()


@dataclass(frozen=True)
class VerifiedProgram:
    program: Program
    max_instructions_executed: int
    accessed_helper_ids: frozenset[int]
    stack_usage: int
    mem_regions: Mapping[int, frozenset[str]] = field(repr=False)
    states_explored: int = 0
    _token: object = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self._token is not _ISSUED:
            raise TypeError("VerifiedProgram instances are produced by verify() only")


# -- range arithmetic ----------------------------------------------------

def _bits_mask(value: int) -> int:
    return (1 << value.bit_length()) - 1


def _concrete_alu(op: int, a: int, b: int, wide: bool) -> int | None:
    """Exact ALU result, or None when the instruction would trap."""
    mask = U64 if wide else U32
    bits = 64 if wide else 32
    a &= mask
    b &= mask
    name = isa.ALU_NAMES[op]
    if name == "add":
        r = a + b
    elif name == "sub":
        r = a - b
    elif name == "mul":
        r = a * b
    elif name == "div":
        if b == 0:
            return None
        r = a // b
    elif name == "mod":
        if b == 0:
            return None
        r = a % b
    elif name == "or":
        r = a | b
    elif name == "and":
        r = a & b
    elif name == "xor":
        r = a ^ b
    elif name == "lsh":
        r = a << (b & (bits - 1))
    elif name == "rsh":
        r = a >> (b & (bits - 1))
    elif name == "arsh":
        signed = a - (1 << bits) if a >> (bits - 1) else a
        r = signed >> (b & (bits - 1))
    elif name == "neg":
        r = -a
    elif name == "mov":
        r = b
    else:
        raise AssertionError(name)
    return r & mask


def _range_alu(name: str, alo: int, ahi: int, blo: int, bhi: int, limit: int) -> tuple[int, int]:
    full = (0, limit)
    if name == "add":
        return (alo + blo, ahi + bhi) if ahi + bhi <= limit else full
    if name == "sub":
        return (alo - bhi, ahi - blo) if alo >= bhi else full
    if name == "mul":
        return (alo * blo, ahi * bhi) if ahi * bhi <= limit else full
    if name == "div":
        return (alo // bhi, ahi // blo) if blo > 0 else (0, ahi)
    if name == "mod":
        if blo > 0 and ahi < blo:
            return (alo, ahi)
        return (0, min(ahi, bhi - 1)) if bhi > 0 else (0, ahi)
    if name == "and":
        return (0, min(ahi, bhi))
    if name == "or":
        return (max(alo, blo), _bits_mask(max(ahi, bhi)))
    if name == "xor":
        return (0, _bits_mask(max(ahi, bhi)))
    if name == "lsh":
        if blo == bhi and blo < 64 and (ahi << blo) <= limit:
            return (alo << blo, ahi << blo)
        return full
    if name in ("rsh", "arsh"):
        if name == "arsh" and ahi > limit >> 1:
            return full
        if blo == bhi:
            shift = blo & (63 if limit == U64 else 31)
            return (alo >> shift, ahi >> shift)
        return (0, ahi)
    return full


def _narrow(lo: int, hi: int, rel: str, olo: int, ohi: int) -> tuple[int, int]:
    """Refine [lo, hi] given ``value rel other`` with other in [olo, ohi]."""
    if rel == "lt":
        return lo, min(hi, ohi - 1)
    if rel == "le":
        return lo, min(hi, ohi)
    if rel == "gt":
        return max(lo, olo + 1), hi
    if rel == "ge":
        return max(lo, olo), hi
    if rel == "eq":
        return max(lo, olo), min(hi, ohi)
    if rel == "ne":
        if olo == ohi:
            if lo == olo:
                lo += 1
            if hi == olo:
                hi -= 1
        return lo, hi
    raise AssertionError(rel)


_FLIP = {"lt": "gt", "le": "ge", "gt": "lt", "ge": "le", "eq": "eq", "ne": "ne"}
_NEGATE = {"lt": "ge", "le": "gt", "gt": "le", "ge": "lt", "eq": "ne", "ne": "eq"}
_JMP_REL = {
    JMP_OPS["jeq"]: "eq", JMP_OPS["jne"]: "ne", JMP_OPS["jgt"]: "gt", JMP_OPS["jge"]: "ge",
    JMP_OPS["jlt"]: "lt", JMP_OPS["jle"]: "le", JMP_OPS["jsgt"]: "gt", JMP_OPS["jsge"]: "ge",
    JMP_OPS["jslt"]: "lt", JMP_OPS["jsle"]: "le",
}
_SIGNED_JMPS = frozenset(JMP_OPS[n] for n in ("jsgt", "jsge", "jslt", "jsle"))


def _concrete_cmp(op: int, a: int, b: int, bits: int) -> bool:
    mask = (1 << bits) - 1
    a &= mask
    b &= mask
    if op in _SIGNED_JMPS:
        a = a - (1 << bits) if a >> (bits - 1) else a
        b = b - (1 << bits) if b >> (bits - 1) else b
    if op == JMP_OPS["jset"]:
        return bool(a & b)
    rel = _JMP_REL[op]
    return {
        "eq": a == b, "ne": a != b, "gt": a > b, "ge": a >= b, "lt": a < b, "le": a <= b,
    }[rel]


# -- the verifier ----------------------------------------------------------

class _Verifier:
    def __init__(self, program: Program, limits: VerifierLimits, helpers: Mapping[int, HelperSignature]):
        self.program = program
        self.insns = program.instructions
        self.limits = limits
        self.helpers = helpers
        self.helper_ids: set[int] = set()
        self.regions: dict[int, set[str]] = {}
        self.stack_usage = 0
        self.back_edge = False
        self.explored = 0
        n = len(self.insns)
        self.wide_tail = [False] * n
        pc = 0
        while pc < n:
            if self.insns[pc].opcode == OP_LDDW:
                if pc + 1 < n:
                    self.wide_tail[pc + 1] = True
                pc += 2
            else:
                pc += 1

    # -- entry ------------------------------------------------------------

    def run(self) -> VerifiedProgram:
        n = len(self.insns)
        if n > self.limits.max_insns:
            raise TooLarge(f"{n} instructions exceed the limit of {self.limits.max_insns}")
        regs = [None] * 11
        regs[1] = ("p", "packet", 0, 0, None)
        regs[2] = ("p", "window", 0, 0, None)
        regs[10] = ("p", "stack", 0, 0, None)
        root = (0, (tuple(regs), (), 0))

        memo: dict = {}
        on_path = {root}
        stack = [[root, self._expand(root), 0, 0]]
        while stack:
            frame = stack[-1]
            succs = frame[1]
            i = frame[2]
            if i < len(succs):
                frame[2] = i + 1
                child = succs[i]
                known = memo.get(child)
                if known is not None:
                    if known > frame[3]:
                        frame[3] = known
                    continue
                if child in on_path:
                    raise UnboundedLoop("execution can revisit an identical state", child[0])
                on_path.add(child)
                stack.append([child, self._expand(child), 0, 0])
            else:
                value = frame[3] + 1
                memo[frame[0]] = value
                on_path.discard(frame[0])
                stack.pop()
                if stack and value > stack[-1][3]:
                    stack[-1][3] = value
        bound = memo[root]
        return VerifiedProgram(
            program=self.program,
            max_instructions_executed=bound,
            accessed_helper_ids=frozenset(self.helper_ids),
            stack_usage=self.stack_usage,
            mem_regions=MappingProxyType({pc: frozenset(r) for pc, r in self.regions.items()}),
            states_explored=self.explored,
            _token=_ISSUED,
        )

    def _expand(self, key) -> list:
        self.explored += 1
        if self.explored > self.limits.max_unrolled:
            if self.back_edge:
                raise UnboundedLoop(
                    f"loop not bounded within {self.limits.max_unrolled} unrolled states", key[0]
                )
            raise TooLarge(f"more than {self.limits.max_unrolled} derived states", key[0])
        pc, state = key
        return self._step(pc, state)

    # -- helpers ----------------------------------------------------------

    def _jump(self, pc: int, target: int) -> int:
        if not 0 <= target < len(self.insns) or self.wide_tail[target]:
            raise InvalidInstruction(f"jump target {target} out of range", pc)
        if target <= pc:
            self.back_edge = True
        return target

    def _next(self, pc: int, width: int = 1) -> int:
        nxt = pc + width
        if nxt >= len(self.insns):
            raise InvalidInstruction("control falls off the end of the program", pc)
        return nxt

    def _read(self, regs, reg: int, pc: int):
        value = regs[reg]
        if value is None:
            raise UninitializedRegister(f"r{reg} read before initialization", pc)
        return value

    def _note(self, pc: int, region: str) -> None:
        self.regions.setdefault(pc, set()).add(region)

    def _check_access(self, state, ptr, off: int, size: int, pc: int, what: str) -> str:
        if ptr[0] != "p":
            raise OutOfBoundsAccess(f"{what} through a non-pointer", pc)
        _, region, lo, hi, slack = ptr
        lo += off
        hi += off
        if region == "stack":
            if lo < -STACK_SIZE or hi + size > 0:
                raise OutOfBoundsAccess(f"stack {what} at [{lo}, {hi + size}) outside frame", pc)
            self.stack_usage = max(self.stack_usage, -lo)
        elif region == "window":
            if lo < 0 or hi + size > WINDOW_SIZE:
                raise OutOfBoundsAccess(f"window {what} at [{lo}, {hi + size}) outside block window", pc)
        else:
            pkt_range = state[2]
            if lo < 0:
                raise OutOfBoundsAccess(f"packet {what} at negative offset", pc)
            ok = (slack is not None and off + size <= slack) or hi + size <= pkt_range
            if not ok:
                raise OutOfBoundsAccess(
                    f"packet {what} of {size} bytes not covered by a length check", pc
                )
        self._note(pc, region)
        return region

    # -- transfer function -----------------------------------------------

    def _step(self, pc: int, state) -> list:
        if self.wide_tail[pc]:
            raise InvalidInstruction("execution reaches the second slot of lddw", pc)
        insn = self.insns[pc]
        op = insn.opcode
        cls = op & 0x07
        regs, spills, pkt_range = state

        if op == OP_EXIT:
            self._read(regs, 0, pc)
            return []
        if op == OP_JA:
            return [(self._jump(pc, pc + 1 + insn.off), state)]
        if op == OP_CALL:
            return [(self._next(pc), self._call(pc, insn, state))]
        if op == OP_LDDW:
            self._writable(insn.dst, pc)
            value = isa.lddw_value(self.program, pc)
            new = list(regs)
            new[insn.dst] = const(value)
            return [(self._next(pc, 2), (tuple(new), spills, pkt_range))]
        if cls in (ALU, ALU64):
            self._writable(insn.dst, pc)
            new = list(regs)
            new[insn.dst] = self._alu(pc, insn, regs)
            return [(self._next(pc), (tuple(new), spills, pkt_range))]
        if cls in (JMP, JMP32):
            return self._cond(pc, insn, state)
        if cls == LDX:
            self._writable(insn.dst, pc)
            size = SIZE_BYTES[op & 0x18]
            ptr = self._read(regs, insn.src, pc)
            region = self._check_access(state, ptr, insn.off, size, pc, "load")
            value = scalar(0, (1 << (8 * size)) - 1)
            if region == "stack" and size == 8 and ptr[2] == ptr[3]:
                slot = ptr[2] + insn.off
                for s_off, s_val in spills:
                    if s_off == slot:
                        value = s_val
                        break
            new = list(regs)
            new[insn.dst] = value
            return [(self._next(pc), (tuple(new), spills, pkt_range))]
        if cls in (ST, STX):
            size = SIZE_BYTES[op & 0x18]
            ptr = self._read(regs, insn.dst, pc)
            if cls == STX:
                stored = self._read(regs, insn.src, pc)
            else:
                stored = const(insn.imm)
            region = self._check_access(state, ptr, insn.off, size, pc, "store")
            if region == "stack":
                spills = self._spill(spills, ptr, insn.off, size, stored)
            return [(self._next(pc), (regs, spills, pkt_range))]
        raise InvalidInstruction(f"unsupported opcode {op:#04x}", pc)

    def _writable(self, reg: int, pc: int) -> None:
        if reg == isa.FRAME_REG:
            raise InvalidInstruction("r10 is read-only", pc)

    def _spill(self, spills, ptr, off, size, stored):
        lo, hi = ptr[2] + off, ptr[3] + off + size
        kept = tuple(s for s in spills if s[0] + 8 <= lo or s[0] >= hi)
        if size == 8 and ptr[2] == ptr[3] and lo % 8 == 0:
            kept = tuple(sorted(kept + ((lo, stored),)))
        return kept

    def _call(self, pc: int, insn: Instruction, state):
        regs, spills, pkt_range = state
        sig = self.helpers.get(insn.imm)
        if sig is None:
            raise UnknownHelper(f"helper id {insn.imm} is not registered", pc)
        self.helper_ids.add(insn.imm)
        self._note(pc, "helper")
        params = sig.params
        for i, kind in enumerate(params):
            reg = i + 1
            value = self._read(regs, reg, pc)
            if kind == "window":
                if value[0] != "p" or value[1] != "window" or value[2] != 0 or value[3] != 0:
                    raise OutOfBoundsAccess(f"argument r{reg} of {sig.name} must be the block window", pc)
                self._note(pc, "window")
            elif kind == "mem":
                size = self._read(regs, reg + 1, pc)
                if size[0] != "s":
                    raise OutOfBoundsAccess(f"size argument of {sig.name} is not a scalar", pc)
                if size[2] > MAX_PACKET:
                    raise OutOfBoundsAccess(f"size argument of {sig.name} is unbounded", pc)
                if (
                    size[2] > 0 and size[4] is not None and value[0] == "p"
                    and value[1] == "packet" and value[2] == value[3] and 0 <= value[2] <= size[4]
                ):
                    # size + k <= len and the pointer sits at offset o <= k
                    self._note(pc, "packet")
                elif size[2] > 0:
                    self._check_access(state, value, 0, size[2], pc, "helper read")
                elif value[0] != "p":
                    raise OutOfBoundsAccess(f"argument r{reg} of {sig.name} is not a pointer", pc)
        new = list(regs)
        new[0] = ("s", 0, MAX_PACKET, True, 0) if sig.ret == "pkt_len" else UNKNOWN
        for reg in range(1, 6):
            new[reg] = None
        return (tuple(new), spills, pkt_range)

    def _alu(self, pc: int, insn: Instruction, regs):
        op = insn.opcode
        wide = (op & 0x07) == ALU64
        limit = U64 if wide else U32
        code = op & 0xF0
        name = isa.ALU_NAMES[code]

        if name == "end":
            value = self._read(regs, insn.dst, pc)
            width_mask = (1 << insn.imm) - 1
            if value[0] == "s" and value[1] == value[2]:
                v = value[1] & width_mask
                if op & X:
                    v = int.from_bytes(v.to_bytes(insn.imm // 8, "little"), "big")
                return const(v)
            if value[0] == "s" and not op & X and value[2] <= width_mask:
                return scalar(value[1], value[2])
            return scalar(0, width_mask)

        if name == "neg":
            value = self._read(regs, insn.dst, pc)
            if value[0] == "s" and value[1] == value[2]:
                return const(_concrete_alu(code, value[1], 0, wide))
            return scalar(0, limit)

        if op & X:
            src = self._read(regs, insn.src, pc)
        else:
            src = const(insn.imm if wide else insn.imm & U32)

        if name == "mov":
            if wide:
                return src
            if src[0] == "s":
                if src[2] <= U32:
                    return ("s", src[1], src[2], False, None)
                if src[1] == src[2]:
                    return const(src[1] & U32)
            return UNKNOWN32

        dst = self._read(regs, insn.dst, pc)

        if dst[0] == "p" or src[0] == "p":
            if wide and name in ("add", "sub"):
                return self._ptr_arith(name, dst, src)
            return scalar(0, limit)

        _, alo, ahi, _, aslack = dst
        _, blo, bhi, _, _ = src
        if alo == ahi and blo == bhi:
            result = _concrete_alu(code, alo, blo, wide)
            return scalar(0, limit) if result is None else const(result)
        if not wide:
            if ahi > U32:
                alo, ahi = 0, U32
            if bhi > U32:
                blo, bhi = 0, U32
        lo, hi = _range_alu(name, alo, ahi, blo, bhi, limit)
        if lo > hi or hi > limit or lo < 0:
            lo, hi = 0, limit
        slack = None
        if wide and aslack is not None and blo == bhi:
            if name == "add" and ahi + blo <= U64:
                slack = aslack - blo
            elif name == "sub" and alo >= blo:
                slack = aslack + blo
        return ("s", lo, hi, False, slack)

    def _ptr_arith(self, name: str, dst, src):
        if dst[0] == "p" and src[0] == "p":
            if name == "sub" and dst[1] == src[1]:
                return UNKNOWN
            return UNKNOWN
        if dst[0] == "s":
            if name == "sub":
                return UNKNOWN
            dst, src = src, dst
        _, region, plo, phi, pslack = dst
        _, slo, shi, _, sslack = src
        if slo == shi and slo > U64 >> 1:
            slo = shi = slo - (1 << 64)  # constant offsets are signed
        if name == "add":
            lo, hi = plo + slo, phi + shi
            delta_const = slo if slo == shi else None
        else:
            lo, hi = plo - shi, phi - slo
            delta_const = -slo if slo == shi else None
        slack = None
        if region == "packet":
            if pslack is not None and delta_const is not None:
                slack = pslack - delta_const
            elif plo == phi and name == "add" and sslack is not None:
                slack = sslack - plo
        return ("p", region, lo, hi, slack)

    def _cond(self, pc: int, insn: Instruction, state) -> list:
        regs, spills, pkt_range = state
        op = insn.opcode
        code = op & 0xF0
        wide = (op & 0x07) == JMP
        taken_pc = self._jump(pc, pc + 1 + insn.off)
        fall_pc = self._next(pc)
        a = self._read(regs, insn.dst, pc)
        if op & X:
            b = self._read(regs, insn.src, pc)
        else:
            b = const(insn.imm)
        both = [(taken_pc, state), (fall_pc, state)]
        if a[0] == "p" or b[0] == "p":
            return both
        bits = 64 if wide else 32
        if a[1] == a[2] and b[1] == b[2]:
            taken = _concrete_cmp(code, a[1], b[1], bits)
            return [(taken_pc if taken else fall_pc, state)]
        if not wide or code == JMP_OPS["jset"]:
            return both
        if code in _SIGNED_JMPS and (a[2] > U64 >> 1 or b[2] > U64 >> 1):
            return both
        rel = _JMP_REL[code]
        out = []
        for target, r in ((taken_pc, rel), (fall_pc, _NEGATE[rel])):
            refined = self._refine(insn, a, b, r, state)
            if refined is not None:
                out.append((target, refined))
        return out

    def _refine(self, insn: Instruction, a, b, rel: str, state):
        regs, spills, pkt_range = state
        alo, ahi = _narrow(a[1], a[2], rel, b[1], b[2])
        blo, bhi = _narrow(b[1], b[2], _FLIP[rel], a[1], a[2])
        if alo > ahi or blo > bhi:
            return None
        a_slack, b_slack = a[4], b[4]
        # learn packet-length facts: X < len or X <= len
        if b[3] and not a[3]:
            bound = {"lt": 1, "le": 0, "eq": 0}.get(rel)
            if bound is not None:
                a_slack = bound if a_slack is None else max(a_slack, bound)
                pkt_range = max(pkt_range, alo + bound)
        elif a[3] and not b[3]:
            bound = {"gt": 1, "ge": 0, "eq": 0}.get(rel)
            if bound is not None:
                b_slack = bound if b_slack is None else max(b_slack, bound)
                pkt_range = max(pkt_range, blo + bound)
        pkt_range = min(pkt_range, MAX_PACKET)
        new = list(regs)
        new[insn.dst] = ("s", alo, ahi, a[3], a_slack)
        if insn.opcode & X and insn.src != insn.dst:
            new[insn.src] = ("s", blo, bhi, b[3], b_slack)
        return (tuple(new), spills, pkt_range)


def verify(
    program: Program,
    limits: VerifierLimits | None = None,
    helpers: Mapping[int, HelperSignature] | None = None,
) -> VerifiedProgram:
    """Check ``program`` and return its verified form."""
    if helpers is None:
        helpers = STANDARD_SIGNATURES
    return _Verifier(program, limits or VerifierLimits(), helpers).run()
