"""Bundled datapath programs, as assembler text.

Return codes shared by the request/response programs: 0 success (emitted
bytes are the response body), 1 not found, 2 malformed request.

``btree_get``
    8-byte key in, 128-byte value out.  Walks the slot's tree from the
    root named by ``kv_route`` through at most :data:`MAX_GET_HEIGHT`
    levels.  The per-level code is replicated rather than looped so each
    level maps onto its own run of pipeline stages.  Returns 3 when no leaf
    is reached within that many levels.
``echo``
    Emits the request payload unchanged.
``logfilter``
    A 64-byte log record in; when it contains ``auth-fail`` the record is
    appended to the slot extent (block 0 holds the match count, match i is
    stored at block i+1) and r0 is 1, otherwise 0.  An 8-byte request reads
    match i back (64 bytes); an empty request emits the count.
``chase``
    ``start_lba u64, depth u64`` in.  Follows the u64 stored at offset 0 of
    each block ``depth`` times (at most 16) and emits the final block number.
``adversarial``
    ``device u64, lba u64, write u64`` in; issues exactly that block access.
"""

from __future__ import annotations

from functools import lru_cache

from .btree import CHILDREN_OFFSET, INTERNAL_MAX_KEYS, KEYS_OFFSET, LEAF_CAPACITY, VALUE_SIZE, VALUES_OFFSET
from .ebpf.asm import assemble
from .ebpf.isa import Program

MAX_GET_HEIGHT = 8
LOG_RECORD_SIZE = 64
LOG_PATTERN = b"auth-fail"
MAX_CHASE_DEPTH = 16


def btree_get_source(max_height: int = MAX_GET_HEIGHT) -> str:
    out = [
        "; r6 key, r7 current block, r8 packet, r9 block window",
        "mov r9, r2",
        "mov r8, r1",
        "call packet_len",
        "jne r0, 8, bad",
        "ldxdw r6, [r8+0]",
        "mov r1, r6",
        "call kv_route",
        "mov r7, r0",
        "jeq r7, -1, bad",
    ]
    for level in range(max_height):
        out += [
            f"level{level}:",
            "mov r1, 0",
            "mov r2, r7",
            "mov r3, r9",
            "call block_read",
            "ldxb r1, [r9+0]",
            "jeq r1, 1, leaf",
            "jne r1, 2, bad",
            "ldxh r2, [r9+2]",
            "mov r3, 0",
            f"scan{level}:",
            f"jge r3, r2, child{level}",
            f"jge r3, {INTERNAL_MAX_KEYS}, child{level}",
            "mov r4, r3",
            "lsh r4, 3",
            "add r4, r9",
            f"ldxdw r5, [r4+{KEYS_OFFSET}]",
            "mov r0, r6  ; compare a copy so r6 keeps one abstract value",
            f"jlt r0, r5, child{level}",
            "add r3, 1",
            f"ja scan{level}",
            f"child{level}:",
            "lsh r3, 3",
            "add r3, r9",
            f"ldxdw r7, [r3+{CHILDREN_OFFSET}]",
        ]
    out += [
        "mov r0, 3",
        "exit",
        "leaf:",
        "ldxh r2, [r9+2]",
        "mov r3, 0",
        "lscan:",
        "jge r3, r2, missing",
        f"jge r3, {LEAF_CAPACITY}, missing",
        "mov r4, r3",
        "lsh r4, 3",
        "add r4, r9",
        f"ldxdw r5, [r4+{KEYS_OFFSET}]",
        "jeq r5, r6, found",
        "add r3, 1",
        "ja lscan",
        "found:",
        f"mul r3, {VALUE_SIZE}",
        "add r3, r9",
        f"add r3, {VALUES_OFFSET}",
        "mov r1, r3",
        f"mov r2, {VALUE_SIZE}",
        "call emit",
        "mov r0, 0",
        "exit",
        "missing:",
        "mov r0, 1",
        "exit",
        "bad:",
        "mov r0, 2",
        "exit",
    ]
    return "\n".join(out) + "\n"


ECHO_SOURCE = """\
mov r6, r1
call packet_len
mov r2, r0
mov r1, r6
call emit
mov r0, 0
exit
"""


def logfilter_source() -> str:
    pattern_head = int.from_bytes(LOG_PATTERN[:8], "little")
    tail = LOG_PATTERN[8]
    last = LOG_RECORD_SIZE - len(LOG_PATTERN)
    copy = []
    for off in range(0, LOG_RECORD_SIZE, 8):
        copy += [f"ldxdw r1, [r8+{off}]", f"stxdw [r9+{off}], r1"]
    return "\n".join([
        "; r6 match count, r7 scan position, r8 packet, r9 block window",
        "mov r9, r2",
        "mov r8, r1",
        "call packet_len",
        "jeq r0, 0, count",
        "jeq r0, 8, readback",
        f"jne r0, {LOG_RECORD_SIZE}, bad",
        f"lddw r6, {pattern_head:#x}",
        "mov r7, 0",
        "scan:",
        f"jgt r7, {last}, nomatch",
        "mov r1, r8",
        "add r1, r7",
        "ldxdw r2, [r1+0]",
        "jne r2, r6, next",
        "ldxb r2, [r1+8]",
        f"jeq r2, {tail}, match",
        "next:",
        "add r7, 1",
        "ja scan",
        "nomatch:",
        "mov r0, 0",
        "exit",
        "match:",
        "mov r1, 0",
        "mov r2, 0",
        "mov r3, r9",
        "call block_read",
        "ldxdw r6, [r9+0]",
        "add r6, 1",
        "stxdw [r9+0], r6",
        "mov r1, 0",
        "mov r2, 0",
        "mov r3, r9",
        "call block_write",
        "stdw [r9+0], 0",
        *copy,
        "mov r1, 0",
        "mov r2, r6",
        "mov r3, r9",
        "call block_write",
        "mov r0, 1",
        "exit",
        "readback:",
        "ldxdw r2, [r8+0]",
        "add r2, 1",
        "mov r1, 0",
        "mov r3, r9",
        "call block_read",
        "mov r1, r9",
        f"mov r2, {LOG_RECORD_SIZE}",
        "call emit",
        "mov r0, 0",
        "exit",
        "count:",
        "mov r1, 0",
        "mov r2, 0",
        "mov r3, r9",
        "call block_read",
        "mov r1, r9",
        "mov r2, 8",
        "call emit",
        "mov r0, 0",
        "exit",
        "bad:",
        "mov r0, 2",
        "exit",
    ]) + "\n"


def chase_source() -> str:
    return "\n".join([
        "; r6 current block, r7 remaining hops, r8 hops taken, r9 block window",
        "mov r9, r2",
        "mov r8, r1",
        "call packet_len",
        "jne r0, 16, bad",
        "ldxdw r6, [r8+0]",
        "ldxdw r7, [r8+8]",
        f"jgt r7, {MAX_CHASE_DEPTH}, bad",
        "mov r8, 0",
        "hop:",
        "jge r8, r7, done",
        f"jge r8, {MAX_CHASE_DEPTH}, done",
        "mov r1, 0",
        "mov r2, r6",
        "mov r3, r9",
        "call block_read",
        "ldxdw r6, [r9+0]",
        "add r8, 1",
        "ja hop",
        "done:",
        "stxdw [r10-8], r6",
        "mov r1, r10",
        "add r1, -8",
        "mov r2, 8",
        "call emit",
        "mov r0, 0",
        "exit",
        "bad:",
        "mov r0, 2",
        "exit",
    ]) + "\n"


ADVERSARIAL_SOURCE = """\
mov r9, r2
mov r8, r1
call packet_len
jne r0, 24, bad
ldxdw r1, [r8+0]
ldxdw r2, [r8+8]
ldxdw r4, [r8+16]
mov r3, r9
jne r4, 0, write
call block_read
mov r0, 0
exit
write:
call block_write
mov r0, 0
exit
bad:
mov r0, 2
exit
"""


SOURCES = {
    "btree-get": btree_get_source,
    "echo": lambda: ECHO_SOURCE,
    "logfilter": logfilter_source,
    "chase": chase_source,
    "adversarial": lambda: ADVERSARIAL_SOURCE,
}


@lru_cache(maxsize=None)
def bundled(name: str) -> Program:
    try:
        source = SOURCES[name]
    except KeyError:
        raise KeyError(f"no bundled program {name!r}; choose from {sorted(SOURCES)}") from None
    return assemble(source(), name=name)
