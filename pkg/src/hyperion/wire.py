"""Datagram framing shared by the daemon and the client.

Every message is a 24-byte little-endian header followed by the payload::

    0   u32  magic 0x48595052
    4   u8   version (1)
    5   u8   opcode
    6   u16  tenant_id
    8   u16  slot_id
    10  u8   status
    11  u8   reserved (bit 0: request server timestamps)
    12  u64  request_id
    20  u32  payload_len

All integers on the wire and in payloads are little-endian.
"""

from __future__ import annotations

import enum
import struct
from typing import NamedTuple

MAGIC = 0x48595052
VERSION = 1
HEADER = struct.Struct("<IBBHHBBQI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 8192
TOKEN_SIZE = 32

FLAG_TIMESTAMPS = 0x01
TIMESTAMP_TRAILER = struct.Struct("<QQ")

assert HEADER_SIZE == 24


class Opcode(enum.IntEnum):
    GET = 0x01
    PUT = 0x02
    DEL = 0x03
    RAW_DISPATCH = 0x04
    LOAD_PROG = 0x10
    CREATE_SLOT = 0x11
    DELETE_SLOT = 0x12
    STATS = 0x20
    ERROR_RESP = 0x7F


DATA_OPCODES = frozenset({Opcode.GET, Opcode.PUT, Opcode.DEL, Opcode.RAW_DISPATCH})
CONTROL_OPCODES = frozenset({Opcode.LOAD_PROG, Opcode.CREATE_SLOT, Opcode.DELETE_SLOT, Opcode.STATS})


class Status(enum.IntEnum):
    OK = 0
    NOT_FOUND = 1
    AUTH_FAILED = 2
    SLOT_BUSY = 3
    TRAP = 4
    BAD_REQUEST = 5
    UNKNOWN_OPCODE = 6
    UNKNOWN_SLOT = 7
    NO_CAPACITY = 8
    VERIFIER_ERROR = 9


class Message(NamedTuple):
    opcode: int
    tenant_id: int = 0
    slot_id: int = 0
    status: int = 0
    reserved: int = 0
    request_id: int = 0
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode(self)

    @property
    def detail(self) -> str:
        """Human-readable detail of a non-OK response."""
        if self.status == Status.OK:
            return ""
        body = self.payload[1:] if self.status == Status.TRAP else self.payload
        return body.decode("utf-8", "replace")

    @property
    def trap_code(self) -> int | None:
        if self.status != Status.TRAP or not self.payload:
            return None
        return self.payload[0]

    def reply(self, status: int, payload: bytes = b"", opcode: int | None = None) -> Message:
        """Response to this request; routing fields and request_id are echoed."""
        if type(payload) is not bytes:
            payload = bytes(payload)
        return _new_tuple(Message, (
            self[0] if opcode is None else opcode, self[1], self[2],
            int(status), self[4], self[5], payload,
        ))

    def error(self, status: int, detail: str) -> Message:
        return self.reply(status, detail.encode("utf-8")[:MAX_PAYLOAD])


# tuple.__new__ skips the Python-level NamedTuple constructor on hot paths
_new_tuple = tuple.__new__


class ProtocolError(ValueError):
    """Undecodable datagram.  ``header`` is set when a reply can still be addressed."""

    status = Status.BAD_REQUEST

    def __init__(self, detail: str, header: Message | None = None) -> None:
        super().__init__(detail)
        self.detail = detail
        self.header = header


def _check_fields(m: Message) -> None:
    for name, value, bits in (
        ("opcode", m.opcode, 8), ("tenant_id", m.tenant_id, 16), ("slot_id", m.slot_id, 16),
        ("status", m.status, 8), ("reserved", m.reserved, 8), ("request_id", m.request_id, 64),
    ):
        if not 0 <= value < (1 << bits):
            raise ValueError(f"{name} {value} does not fit in {bits} bits")
    if len(m.payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(m.payload)} bytes exceeds {MAX_PAYLOAD}")


def encode(m: Message) -> bytes:
    _check_fields(m)
    return HEADER.pack(
        MAGIC, VERSION, m.opcode, m.tenant_id, m.slot_id, m.status, m.reserved,
        m.request_id, len(m.payload),
    ) + bytes(m.payload)


def decode(data: bytes) -> Message:
    if len(data) < HEADER_SIZE:
        raise ProtocolError(f"datagram of {len(data)} bytes is shorter than the header")
    magic, version, opcode, tenant, slot, status, reserved, rid, plen = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic:#010x}")
    header = Message(opcode, tenant, slot, status, reserved, rid)
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}", header)
    if plen > MAX_PAYLOAD:
        raise ProtocolError(f"payload_len {plen} exceeds {MAX_PAYLOAD}", header)
    if len(data) - HEADER_SIZE != plen:
        raise ProtocolError(
            f"payload_len {plen} but {len(data) - HEADER_SIZE} payload bytes present", header
        )
    return Message(opcode, tenant, slot, status, reserved, rid, bytes(data[HEADER_SIZE:]))


# -- payload helpers ---------------------------------------------------------

_KEY = struct.Struct("<Q")
_U32 = struct.Struct("<I")


def key_payload(key: int) -> bytes:
    return _KEY.pack(key)


def put_payload(key: int, value: bytes) -> bytes:
    return _KEY.pack(key) + bytes(value)


def split_timestamps(m: Message) -> tuple[Message, tuple[int, int] | None]:
    """Strip the server timestamp trailer from a response, if requested."""
    if not m.reserved & FLAG_TIMESTAMPS or len(m.payload) < TIMESTAMP_TRAILER.size:
        return m, None
    cut = len(m.payload) - TIMESTAMP_TRAILER.size
    body = m.payload[:cut]
    recv_ns, done_ns = TIMESTAMP_TRAILER.unpack_from(m.payload, cut)
    return _new_tuple(Message, (m[0], m[1], m[2], m[3], m[4], m[5], body)), (recv_ns, done_ns)


def load_prog_payload(token: bytes, image: bytes) -> bytes:
    return _token(token) + bytes(image)


def create_slot_payload(token: bytes, program_id: int, blocks: int, budget: int) -> bytes:
    return _token(token) + struct.pack("<III", program_id, blocks, budget)


def token_payload(token: bytes) -> bytes:
    return _token(token)


def _token(token: bytes) -> bytes:
    if len(token) != TOKEN_SIZE:
        raise ValueError(f"auth tokens are {TOKEN_SIZE} bytes")
    return bytes(token)


def u32(value: int) -> bytes:
    return _U32.pack(value)
