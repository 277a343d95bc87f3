"""eBPF subset: encoding, assembler, verifier and interpreter."""

from .asm import AssemblyError, assemble, disassemble
from .helpers import (
    BLOCK_READ, BLOCK_WRITE, EMIT, KV_ROUTE, PACKET_LEN, STANDARD_SIGNATURES, TIME_NOW_NS,
    DuplicateHelperId, HelperSignature, register_helper,
)
from .isa import (
    DecodeError, Instruction, MalformedEncoding, Program, TruncatedWideInstruction, UnknownOpcode,
    decode, encode, load,
)
from .verifier import (
    InvalidInstruction, OutOfBoundsAccess, TooLarge, UnboundedLoop, UninitializedRegister,
    UnknownHelper, VerifiedProgram, VerifierError, VerifierLimits, verify,
)
from .vm import (
    PACKET_BASE, STACK_TOP, WINDOW_BASE, ExecResult, ExecutionContext, Trap, TrapCode, base_helpers,
    execute, run,
)
