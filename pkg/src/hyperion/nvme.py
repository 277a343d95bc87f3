"""Simulated NVMe block devices.

Each device has a bounded submission queue.  A command completes at its
submit time plus a latency drawn from the :class:`LatencyModel`; writes are
applied and read data is captured at completion time, so a block is always
observed whole.  There is no device-side caching.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .simclock import LatencyModel, Simulator, sample_nvme_latency

BLOCK_SIZE = 4096
ZERO_BLOCK = bytes(BLOCK_SIZE)


class NvmeError(Exception):
    pass


class QueueFull(NvmeError):
    pass


class AddressOutOfRange(NvmeError):
    pass


@dataclass(frozen=True)
class DeviceConfig:
    device_count: int = 4
    capacity_blocks: int = 65536
    queue_depth: int = 16
    block_size: int = BLOCK_SIZE
    backing: str = "memory"

    def __post_init__(self) -> None:
        if self.device_count < 1 or self.capacity_blocks < 1 or self.queue_depth < 1:
            raise ValueError("device_count, capacity_blocks and queue_depth must be >= 1")
        if self.block_size != BLOCK_SIZE:
            raise ValueError(f"block size is fixed at {BLOCK_SIZE} bytes")
        if self.backing != "memory" and not self.backing.startswith("file:"):
            raise ValueError(f"unknown backing {self.backing!r}")


class BlockAddress(NamedTuple):
    device: int
    lba: int


@dataclass(eq=False, slots=True)
class Command:
    kind: str
    addr: BlockAddress
    data: bytes | None = None
    tag: int = -1
    submit_time: int = -1
    completion_time: int = -1
    status: int = 0
    result: bytes | None = None
    on_complete: Callable[[Command], None] | None = field(default=None, repr=False)

    @classmethod
    def read(cls, device: int, lba: int, on_complete=None) -> Command:
        return cls("read", BlockAddress(device, lba), on_complete=on_complete)

    @classmethod
    def write(cls, device: int, lba: int, data: bytes, on_complete=None) -> Command:
        return cls("write", BlockAddress(device, lba), data, on_complete=on_complete)


class Completion(NamedTuple):
    tag: int
    status: int
    completion_time: int


class AccessRecord(NamedTuple):
    time: int
    device: int
    lba: int
    kind: str
    source: object


class _MemoryBacking:
    """Sparse block store; never-written blocks read as zeros."""

    def __init__(self) -> None:
        self.blocks: dict[int, bytes] = {}

    def read(self, lba: int) -> bytes:
        return self.blocks.get(lba, ZERO_BLOCK)

    def write(self, lba: int, data: bytes) -> None:
        self.blocks[lba] = data

    def close(self) -> None:
        pass


class _FileBacking:
    """Raw image file, one per device, sized to the device capacity."""

    def __init__(self, path: str, capacity_blocks: int) -> None:
        mode = "r+b" if os.path.exists(path) else "w+b"
        self._fh = open(path, mode)
        self._fh.truncate(capacity_blocks * BLOCK_SIZE)

    def read(self, lba: int) -> bytes:
        self._fh.seek(lba * BLOCK_SIZE)
        return self._fh.read(BLOCK_SIZE)

    def write(self, lba: int, data: bytes) -> None:
        self._fh.seek(lba * BLOCK_SIZE)
        self._fh.write(data)

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def _sampler(model: LatencyModel, rng) -> Callable[[], int]:
    if model.distribution != "uniform":
        return lambda: sample_nvme_latency(model, rng)
    lo = model.nvme_min_ns
    span = model.nvme_max_ns - lo + 1
    draw = rng.random
    # same draw as sample_nvme_latency, without the per-call dispatch
    return lambda: lo + int(draw() * span)


class NvmeSubsystem:
    """All simulated devices behind the datapath.

    ``access_log`` (when enabled) records every completed command with the
    ``source`` tag given at submission; the slot manager uses it to audit
    isolation.
    """

    def __init__(
        self,
        sim: Simulator,
        config: DeviceConfig | None = None,
        latency: LatencyModel | None = None,
        *,
        write_latency: LatencyModel | None = None,
        access_log: bool = True,
        sample_log: bool = False,
    ) -> None:
        self.sim = sim
        self.config = config or DeviceConfig()
        self.latency = latency or LatencyModel()
        self.write_latency = write_latency or self.latency
        self._rng = sim.rng("nvme")
        self._sample_read = _sampler(self.latency, self._rng)
        self._sample_write = _sampler(self.write_latency, self._rng)
        model = self.latency
        self._uniform_read = (
            (model.nvme_min_ns, model.nvme_max_ns - model.nvme_min_ns + 1, self._rng.random)
            if model.distribution == "uniform" else None
        )
        cfg = self.config
        if cfg.backing == "memory":
            self._backing = [_MemoryBacking() for _ in range(cfg.device_count)]
        else:
            prefix = cfg.backing[len("file:"):]
            self._backing = [
                _FileBacking(f"{prefix}{d}.img", cfg.capacity_blocks) for d in range(cfg.device_count)
            ]
        self._memory = [getattr(b, "blocks", None) for b in self._backing]
        self._inflight = [0] * cfg.device_count
        self._done: list[list[Completion]] = [[] for _ in range(cfg.device_count)]
        self._waiting: list[deque[tuple[Command, object]]] = [deque() for _ in range(cfg.device_count)]
        self._next_tag = 1
        self.submitted = 0
        self.completed = 0
        self.access_log: list[AccessRecord] | None = [] if access_log else None
        self.samples: list[tuple[int, int]] | None = [] if sample_log else None

    # -- command path -------------------------------------------------

    def _check(self, addr: BlockAddress) -> None:
        if not 0 <= addr.device < self.config.device_count:
            raise AddressOutOfRange(f"device {addr.device} out of range")
        if not 0 <= addr.lba < self.config.capacity_blocks:
            raise AddressOutOfRange(f"lba {addr.lba} out of range on device {addr.device}")

    def inflight(self, device: int) -> int:
        return self._inflight[device]

    def submit(self, device: int, command: Command, source: object = None) -> int:
        addr = command.addr
        if addr.device != device:
            raise ValueError("command address does not match target device")
        self._check(addr)
        if self._inflight[device] >= self.config.queue_depth:
            raise QueueFull(f"device {device} has {self.config.queue_depth} commands in flight")
        return self._issue(device, command, source)

    def submit_or_wait(self, command: Command, source: object = None) -> None:
        """Submit now, or park the command until the device queue drains."""
        device, lba = command.addr
        cfg = self.config
        if not (0 <= device < cfg.device_count and 0 <= lba < cfg.capacity_blocks):
            self._check(command.addr)
        if self._inflight[device] >= cfg.queue_depth:
            self._waiting[device].append((command, source))
            return
        uniform = self._uniform_read
        if command.kind != "read" or uniform is None or self.samples is not None:
            self._issue(device, command, source)
            return
        # fast path of _issue for uniformly distributed reads
        lo, span, draw = uniform
        tag = self._next_tag
        self._next_tag = tag + 1
        command.tag = tag
        sim = self.sim
        command.submit_time = sim._now
        self._inflight[device] += 1
        self.submitted += 1
        sim.schedule(lo + int(draw() * span), self._complete, command, source)

    def _issue(self, device: int, command: Command, source: object) -> int:
        kind = command.kind
        if kind == "read":
            uniform = self._uniform_read
            if uniform is not None:
                lo, span, draw = uniform
                latency = lo + int(draw() * span)
            else:
                latency = self._sample_read()
        elif kind == "write":
            if command.data is None or len(command.data) != BLOCK_SIZE:
                raise ValueError("write payload must be exactly one block")
            latency = self._sample_write()
        else:
            raise ValueError(f"unknown command kind {kind!r}")
        tag = self._next_tag
        self._next_tag = tag + 1
        command.tag = tag
        sim = self.sim
        command.submit_time = sim._now
        self._inflight[device] += 1
        self.submitted += 1
        if self.samples is not None:
            self.samples.append((tag, latency))
        sim.schedule(latency, self._complete, command, source)
        return tag

    def _complete(self, command: Command, source: object) -> None:
        device, lba = command.addr
        if command.kind == "write":
            self._backing[device].write(lba, bytes(command.data))
        else:
            blocks = self._memory[device]
            if blocks is not None:
                command.result = blocks.get(lba, ZERO_BLOCK)
            else:
                command.result = self._backing[device].read(lba)
        now = self.sim._now
        command.completion_time = now
        self._inflight[device] -= 1
        self.completed += 1
        on_complete = command.on_complete
        if on_complete is None:
            # callback commands are delivered directly; the rest are polled
            self._done[device].append(Completion(command.tag, 0, now))
        if self.access_log is not None:
            self.access_log.append(AccessRecord(now, device, lba, command.kind, source))
        waiting = self._waiting[device]
        if waiting:
            parked, parked_source = waiting.popleft()
            self._issue(device, parked, parked_source)
        if on_complete is not None:
            on_complete(command)

    def completions(self, device: int) -> list[Completion]:
        """Drain the completion queue of one device."""
        done = self._done[device]
        self._done[device] = []
        done.sort(key=lambda c: (c.completion_time, c.tag))
        return done

    # -- synchronous convenience ---------------------------------------

    def _sync(self, command: Command, source: object) -> Command:
        self.submit(command.addr.device, command, source)
        self.sim.run_until(lambda: command.completion_time >= 0)
        return command

    def read_block_sync(self, addr: BlockAddress, source: object = None) -> bytes:
        addr = BlockAddress(*addr)
        self._check(addr)
        return self._sync(Command("read", addr), source).result

    def write_block_sync(self, addr: BlockAddress, data: bytes, source: object = None) -> None:
        addr = BlockAddress(*addr)
        self._check(addr)
        self._sync(Command("write", addr, bytes(data)), source)

    # -- out-of-band access (no latency, not logged) --------------------

    def peek(self, addr: BlockAddress) -> bytes:
        addr = BlockAddress(*addr)
        self._check(addr)
        return self._backing[addr.device].read(addr.lba)

    def poke(self, addr: BlockAddress, data: bytes) -> None:
        addr = BlockAddress(*addr)
        self._check(addr)
        if len(data) != BLOCK_SIZE:
            raise ValueError("block payload must be exactly one block")
        self._backing[addr.device].write(addr.lba, bytes(data))

    def close(self) -> None:
        for backing in self._backing:
            backing.close()
