"""Slot-relative block I/O.

Datapath code (the native B+ tree and eBPF helper hooks) is written as
generators that yield :class:`BlockRequest` with slot-relative addresses and
are resumed with the completed :class:`~hyperion.nvme.Command`.  An
:class:`ExtentIO` translates addresses into one extent and drives such
generators either synchronously or from simulator events.  An address
outside the extent is thrown back into the generator as an isolation trap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Generator, NamedTuple

from .ebpf.helpers import BLOCK_READ, BLOCK_WRITE, KV_ROUTE, STANDARD_SIGNATURES
from .ebpf.vm import U64, Trap, TrapCode, base_helpers
from .nvme import BlockAddress, Command, NvmeSubsystem


class BlockRequest(NamedTuple):
    kind: str  # "read" | "write"
    lba: int
    data: bytes | None = None
    device: int = 0


@dataclass(frozen=True)
class Extent:
    device: int
    first_lba: int
    block_count: int

    @property
    def end_lba(self) -> int:
        return self.first_lba + self.block_count

    def overlaps(self, other: Extent) -> bool:
        return (
            self.device == other.device
            and self.first_lba < other.end_lba
            and other.first_lba < self.end_lba
        )

    def contains(self, device: int, lba: int) -> bool:
        return device == self.device and self.first_lba <= lba < self.end_lba


_new_tuple = tuple.__new__

BlockGen = Generator[BlockRequest, Command, Any]


class ExtentIO:
    def __init__(self, nvme: NvmeSubsystem, extent: Extent, source: object = None) -> None:
        self.nvme = nvme
        self.extent = extent
        self.source = source

    def translate(self, request: BlockRequest) -> Command:
        ext = self.extent
        if request.device != 0 or not 0 <= request.lba < ext.block_count:
            raise Trap(
                TrapCode.ISOLATION_FAULT,
                f"block {request.lba} on slot device {request.device} is outside the slot extent",
            )
        addr = BlockAddress(ext.device, ext.first_lba + request.lba)
        if request.kind == "read":
            return Command("read", addr)
        if request.kind == "write":
            return Command("write", addr, bytes(request.data))
        raise ValueError(f"unknown block request {request.kind!r}")

    def run_sync(self, gen: BlockGen) -> Any:
        """Drive ``gen`` to completion, blocking in virtual time per request."""
        send: Any = None
        exc: BaseException | None = None
        while True:
            try:
                request = gen.throw(exc) if exc is not None else gen.send(send)
            except StopIteration as stop:
                return stop.value
            exc = None
            try:
                cmd = self.translate(request)
            except Trap as trap:
                exc = trap
                continue
            self.nvme.submit(cmd.addr.device, cmd, self.source)
            self.nvme.sim.run_until(lambda: cmd.completion_time >= 0)
            send = cmd

    def run_async(self, gen: BlockGen, on_done: Callable[[Any, BaseException | None], None]) -> None:
        """Drive ``gen`` from simulator events.

        ``on_done(result, None)`` follows a normal return and
        ``on_done(None, exc)`` an exception escaping the generator.
        """
        source = self.source
        ext = self.extent
        device, first, count = ext.device, ext.first_lba, ext.block_count
        submit = self.nvme.submit_or_wait

        def resume(send: Any = None, exc: BaseException | None = None) -> None:
            while True:
                try:
                    request = gen.throw(exc) if exc is not None else gen.send(send)
                except StopIteration as stop:
                    on_done(stop.value, None)
                    return
                except Exception as err:  # noqa: BLE001 - surfaced to the caller
                    on_done(None, err)
                    return
                kind, lba, data, dev = request
                if kind == "read" and dev == 0 and 0 <= lba < count:
                    # common case of translate(), inlined
                    cmd = Command("read", _new_tuple(BlockAddress, (device, first + lba)),
                                  None, -1, -1, -1, 0, None, resume)
                else:
                    try:
                        cmd = self.translate(request)
                    except Trap as trap:
                        send, exc = None, trap
                        continue
                    cmd.on_complete = resume
                submit(cmd, source)
                return

        resume()


def _block_read(ctx, device, lba, window, *_):
    cmd = yield BlockRequest("read", lba, device=device)
    ctx.window[:] = cmd.result
    return 0


def _block_write(ctx, device, lba, window, *_):
    yield BlockRequest("write", lba, bytes(ctx.window), device=device)
    return 0


def storage_helpers(kv_route: Callable[[int], int] | None = None) -> dict:
    """The full standard helper table for a slot.

    Block helpers take slot-relative addresses; translation and the isolation
    check happen in whichever :class:`ExtentIO` drives the program.
    ``kv_route`` returns the root block of the slot's tree; slots without a
    tree answer with all ones.
    """
    table = base_helpers()
    table[BLOCK_READ] = (STANDARD_SIGNATURES[BLOCK_READ], _block_read)
    table[BLOCK_WRITE] = (STANDARD_SIGNATURES[BLOCK_WRITE], _block_write)
    route = kv_route or (lambda key: U64)
    table[KV_ROUTE] = (STANDARD_SIGNATURES[KV_ROUTE], lambda ctx, key, *_: route(key))
    return table
