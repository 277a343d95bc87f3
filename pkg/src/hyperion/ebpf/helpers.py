"""Helper signatures and helper tables.

A helper table maps a call id to ``(HelperSignature, hook)``.  Hooks are
called as ``hook(ctx, r1, r2, r3, r4, r5)`` and return an int, or a
generator that yields storage commands and finally returns an int; the
latter is how block I/O suspends a program until the device completes.

Parameter kinds used by the verifier:

``scalar``  any initialized non-pointer value
``window``  pointer to the start of the 4096-byte block window
``mem``     pointer to readable memory; the following ``size`` param bounds it
``size``    scalar byte count with a known upper bound
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Mapping

STANDARD_ID_LIMIT = 1024

BLOCK_READ = 1
BLOCK_WRITE = 2
PACKET_LEN = 3
EMIT = 4
TIME_NOW_NS = 5
KV_ROUTE = 6


class DuplicateHelperId(ValueError):
    pass


@dataclass(frozen=True)
class HelperSignature:
    id: int
    name: str
    params: tuple[str, ...] = ()
    ret: str = "scalar"

    def __post_init__(self) -> None:
        if len(self.params) > 5:
            raise ValueError("helpers take at most five arguments")
        for i, kind in enumerate(self.params):
            if kind not in ("scalar", "window", "mem", "size"):
                raise ValueError(f"unknown parameter kind {kind!r}")
            if kind == "mem" and (i + 1 >= len(self.params) or self.params[i + 1] != "size"):
                raise ValueError("a mem parameter must be followed by a size parameter")
        if self.ret not in ("scalar", "pkt_len"):
            raise ValueError(f"unknown return kind {self.ret!r}")


STANDARD_SIGNATURES = {
    BLOCK_READ: HelperSignature(BLOCK_READ, "block_read", ("scalar", "scalar", "window")),
    BLOCK_WRITE: HelperSignature(BLOCK_WRITE, "block_write", ("scalar", "scalar", "window")),
    PACKET_LEN: HelperSignature(PACKET_LEN, "packet_len", (), "pkt_len"),
    EMIT: HelperSignature(EMIT, "emit", ("mem", "size")),
    TIME_NOW_NS: HelperSignature(TIME_NOW_NS, "time_now_ns"),
    KV_ROUTE: HelperSignature(KV_ROUTE, "kv_route", ("scalar",)),
}

Hook = Callable[..., object]
HelperTable = Mapping[int, tuple[HelperSignature, Hook]]


def register_helper(table: HelperTable, signature: HelperSignature, hook: Hook) -> HelperTable:
    """Return a new table with ``signature`` bound to ``hook``."""
    if signature.id in table:
        raise DuplicateHelperId(f"helper id {signature.id} already registered")
    updated = dict(table)
    updated[signature.id] = (signature, hook)
    return MappingProxyType(updated)


def signatures_of(table: HelperTable) -> dict[int, HelperSignature]:
    return {hid: sig for hid, (sig, _) in table.items()}
