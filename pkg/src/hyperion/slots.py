"""Tenants, program loading and slots.

A slot binds one verified, compiled program to a tenant, a logic-unit
budget and an exclusively owned extent.  Requests to a slot run one at a
time to completion inside simulator events; up to ``queue_depth`` more wait
in a FIFO and anything beyond that is refused with SlotBusy.

Bundled programs live under the administrative tenant 0 with ids from
:data:`BUILTIN_ID_BASE` and may be instantiated by any tenant.  The
``kv-btree`` builtin serves GET/PUT/DEL with the native tree engine; its
plan and cost are those of the eBPF get program it can optionally run.
"""

from __future__ import annotations

import hmac
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache, partial
from typing import Any, Callable, Iterable

from . import wire
from .blockio import Extent, ExtentIO, storage_helpers
from .btree import VALUE_SIZE, BTree, BTreeError, ExtentTooSmall, OutOfSpace
from .compiler import (
    DEFAULT_LANE_WIDTH, DEFAULT_SLOT_BUDGET, PipelinePlan, ResourceCost, compile_program, cost,
)
from .ebpf import isa
from .ebpf.verifier import VerifiedProgram, VerifierError, VerifierLimits, verify
from .ebpf.vm import DEFAULT_FUEL, ExecResult, ExecutionContext, Trap, run
from .nvme import ZERO_BLOCK, BlockAddress, NvmeSubsystem
from .programs import bundled
from .simclock import Simulator
from .wire import FLAG_TIMESTAMPS, TIMESTAMP_TRAILER, Message, Opcode, Status

log = logging.getLogger(__name__)

ADMIN_TENANT = 0
BUILTIN_ID_BASE = 0x8000
DEFAULT_QUEUE_DEPTH = 64
MAX_EMIT = wire.MAX_PAYLOAD - 8 - TIMESTAMP_TRAILER.size

BUILTINS = (
    ("kv-btree", "btree-get", "kv"),
    ("btree-get", "btree-get", None),
    ("echo", "echo", None),
    ("logfilter", "logfilter", None),
    ("chase", "chase", None),
    ("adversarial", "adversarial", None),
)

SLOT_INFO = struct.Struct("<HHQIII")
SLOT_STATS = struct.Struct("<QQQ")
CREATE_ARGS = struct.Struct("<III")
_KEY = struct.Struct("<Q")
_R0 = struct.Struct("<Q")
_TRAILER_PACK = TIMESTAMP_TRAILER.pack


_new_tuple = tuple.__new__


class SlotError(Exception):
    status = Status.BAD_REQUEST


class AuthFailed(SlotError):
    status = Status.AUTH_FAILED


class NoCapacity(SlotError):
    status = Status.NO_CAPACITY


class BudgetExceeded(NoCapacity):
    pass


class UnknownSlot(SlotError):
    status = Status.UNKNOWN_SLOT


class SlotGone(UnknownSlot):
    pass


class SlotBusy(SlotError):
    status = Status.SLOT_BUSY


class UnknownProgram(SlotError):
    pass


class CompileError(SlotError):
    status = Status.VERIFIER_ERROR


@dataclass(frozen=True)
class Tenant:
    tenant_id: int
    auth_token: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if not 0 <= self.tenant_id <= 0xFFFF:
            raise ValueError("tenant ids are 16-bit")
        if len(self.auth_token) != wire.TOKEN_SIZE:
            raise ValueError(f"auth tokens are {wire.TOKEN_SIZE} bytes")


@dataclass(frozen=True)
class LoadedProgram:
    program_id: int
    tenant_id: int
    name: str
    verified: VerifiedProgram
    plan: PipelinePlan
    service: str | None = None


@dataclass
class SlotStats:
    requests: int = 0
    traps: int = 0
    busy_ns: int = 0

    def encode(self) -> bytes:
        return SLOT_STATS.pack(self.requests, self.traps, self.busy_ns)

    @classmethod
    def decode(cls, payload: bytes) -> SlotStats:
        return cls(*SLOT_STATS.unpack_from(payload, 0))


@dataclass
class Slot:
    slot_id: int
    tenant_id: int
    program: LoadedProgram
    plan: PipelinePlan
    cost: ResourceCost
    extent: Extent
    budget: int
    io: ExtentIO
    stats: SlotStats = field(default_factory=SlotStats)
    tree: BTree | None = None
    helpers: dict = field(default_factory=dict, repr=False)
    queue: deque = field(default_factory=deque, repr=False)
    busy: bool = False
    deleted: bool = False

    @property
    def service(self) -> str | None:
        return self.program.service

    def info(self) -> bytes:
        e = self.extent
        return SLOT_INFO.pack(self.slot_id, e.device, e.first_lba, e.block_count,
                              self.cost.logic_units, self.cost.stage_count)


def _route_root(slot: Slot) -> Callable[[int], int]:
    def route(key: int) -> int:
        tree = slot.tree
        if tree is None or tree.sb is None:
            return (1 << 64) - 1
        return tree.sb.root
    return route


def _raise(err: BaseException):
    raise err


def _kv_gen(tree: BTree, op: int, payload: bytes) -> Callable[[], Any]:
    if op == Opcode.GET and len(payload) == 8:
        return partial(tree.get, _KEY.unpack(payload)[0])
    if op == Opcode.PUT and len(payload) == 8 + VALUE_SIZE:
        return partial(tree.put, _KEY.unpack_from(payload)[0], payload[8:])
    if op == Opcode.DEL and len(payload) == 8:
        return partial(tree.delete, _KEY.unpack(payload)[0])
    name = Opcode(op).name if op in Opcode._value2member_map_ else f"{op:#04x}"
    return partial(_raise, ValueError(f"malformed {name} payload of {len(payload)} bytes"))


def _kv_finish(request: Message, outcome: Any, error: BaseException | None) -> Message:
    if error is not None:
        if isinstance(error, OutOfSpace):
            return request.error(Status.NO_CAPACITY, str(error))
        if isinstance(error, Trap):
            return request.reply(Status.TRAP, bytes([error.code]) + error.detail.encode())
        if isinstance(error, (ValueError, BTreeError)):
            return request.error(Status.BAD_REQUEST, str(error))
        raise error
    op = request[0]
    if op == Opcode.GET:
        value = outcome[0]
        if value is None:
            return request.error(Status.NOT_FOUND, "key not found")
        return request.reply(Status.OK, value)
    if op == Opcode.PUT:
        return request.reply(Status.OK, b"\x01" if outcome == "inserted" else b"\x00")
    if not outcome:
        return request.error(Status.NOT_FOUND, "key not found")
    return request.reply(Status.OK)


def _ebpf_finish(request: Message, result: ExecResult | None, error: BaseException | None) -> Message:
    if error is not None:
        return request.error(Status.BAD_REQUEST, str(error))
    if result.trap is not None:
        return request.reply(Status.TRAP, bytes([result.trap]) + result.trap_detail.encode())
    if request[0] == Opcode.RAW_DISPATCH:
        return request.reply(Status.OK, _R0.pack(result.return_value) + result.emitted)
    if result.return_value == 0:
        return request.reply(Status.OK, result.emitted)
    if result.return_value == 1:
        return request.error(Status.NOT_FOUND, "not found")
    return request.error(Status.BAD_REQUEST, f"program returned {result.return_value}")


@lru_cache(maxsize=None)
def _builtin_plan(source: str, limits: VerifierLimits | None, lane_width: int):
    # verified programs are immutable, so managers share them
    vp = verify(bundled(source), limits)
    return vp, compile_program(vp, lane_width)


class SlotManager:
    def __init__(
        self,
        sim: Simulator,
        nvme: NvmeSubsystem,
        tenants: Iterable[Tenant] = (),
        queue_depth: int = DEFAULT_QUEUE_DEPTH,
        zero_on_free: bool = False,
        lane_width: int = DEFAULT_LANE_WIDTH,
        fuel: int = DEFAULT_FUEL,
        kv_get_via_ebpf: bool = False,
        record_intervals: bool = False,
        verifier_limits: VerifierLimits | None = None,
        record_dispatch: bool = False,
    ) -> None:
        self.sim = sim
        self.nvme = nvme
        self.tenants = {t.tenant_id: t for t in tenants}
        self.queue_depth = queue_depth
        self.zero_on_free = zero_on_free
        self.lane_width = lane_width
        self.fuel = fuel
        self.kv_get_via_ebpf = kv_get_via_ebpf
        self.verifier_limits = verifier_limits
        self.programs: dict[int, LoadedProgram] = {}
        self.slots: dict[int, Slot] = {}
        self.builtins: dict[str, int] = {}
        # (time, request_id, tenant_id, slot_id) per data request, when enabled
        self.dispatch_log: list[tuple[int, int, int, int]] | None = [] if record_dispatch else None
        self.intervals: list[tuple[int, int, int]] | None = [] if record_intervals else None
        self._next_program = 1
        self._next_slot = 1
        self._next_device = 0
        self._dummy_token = bytes(wire.TOKEN_SIZE)
        for name, source, service in BUILTINS:
            pid = BUILTIN_ID_BASE + len(self.builtins)
            vp, plan = _builtin_plan(source, verifier_limits, lane_width)
            self.programs[pid] = LoadedProgram(pid, ADMIN_TENANT, name, vp, plan, service)
            self.builtins[name] = pid

    # -- auth and programs ---------------------------------------------------------

    def authenticate(self, tenant_id: int, token: bytes) -> Tenant:
        tenant = self.tenants.get(tenant_id)
        expected = tenant.auth_token if tenant is not None else self._dummy_token
        ok = hmac.compare_digest(expected, bytes(token))
        if tenant is None or not ok:
            log.info("auth failed for tenant %d", tenant_id)
            raise AuthFailed(f"authentication failed for tenant {tenant_id}")
        return tenant

    def _build(self, pid: int, tenant_id: int, name: str, program: isa.Program,
               service: str | None = None) -> LoadedProgram:
        vp = verify(program, self.verifier_limits)
        try:
            plan = compile_program(vp, self.lane_width)
        except ValueError as err:
            raise CompileError(str(err)) from err
        return LoadedProgram(pid, tenant_id, name, vp, plan, service)

    def load_image(self, tenant_id: int, auth_token: bytes, image: bytes, name: str = "") -> int:
        """Decode, verify and compile ``image``; raises DecodeError/VerifierError on bad input."""
        self.authenticate(tenant_id, auth_token)
        program = isa.decode(image, name=name or "image")
        pid = self._next_program
        if pid >= BUILTIN_ID_BASE:
            raise NoCapacity("program table full")
        loaded = self._build(pid, tenant_id, name or f"prog{pid}", program)
        self._next_program += 1
        self.programs[pid] = loaded
        log.info("tenant %d loaded program %d (%d insns)", tenant_id, pid, len(program.instructions))
        return pid

    # -- slots -----------------------------------------------------------------------

    def _first_fit(self, device: int, blocks: int) -> int | None:
        capacity = self.nvme.config.capacity_blocks
        cursor = 0
        taken = sorted(s.extent.first_lba for s in self.slots.values() if s.extent.device == device)
        ends = {s.extent.first_lba: s.extent.end_lba for s in self.slots.values() if s.extent.device == device}
        for first in taken:
            if first - cursor >= blocks:
                return cursor
            cursor = max(cursor, ends[first])
        return cursor if capacity - cursor >= blocks else None

    def _allocate(self, blocks: int) -> Extent:
        count = self.nvme.config.device_count
        for i in range(count):
            device = (self._next_device + i) % count
            first = self._first_fit(device, blocks)
            if first is not None:
                self._next_device = (device + 1) % count
                return Extent(device, first, blocks)
        raise NoCapacity(f"no device has {blocks} contiguous free blocks")

    def create_slot(
        self,
        tenant_id: int,
        auth_token: bytes,
        program_id: int,
        requested_blocks: int,
        budget: int = DEFAULT_SLOT_BUDGET,
        lane_width: int | None = None,
    ) -> Slot:
        self.authenticate(tenant_id, auth_token)
        program = self.programs.get(program_id)
        if program is None or program.tenant_id not in (tenant_id, ADMIN_TENANT):
            raise UnknownProgram(f"program {program_id} is not available to tenant {tenant_id}")
        if requested_blocks < 1:
            raise NoCapacity("a slot needs at least one block")
        if program.service == "kv" and requested_blocks < 3:
            raise ExtentTooSmall("a key-value slot needs at least 3 blocks")
        plan = program.plan
        if lane_width is not None and lane_width != plan.lane_width:
            plan = compile_program(program.verified, lane_width)
        c = cost(plan, budget)
        if not c.fits:
            raise BudgetExceeded(f"plan needs {c.logic_units} logic units, budget is {budget}")
        slot_id = self._next_slot
        while slot_id in self.slots:
            slot_id += 1
        if slot_id > 0xFFFF:
            raise NoCapacity("slot table full")
        extent = self._allocate(requested_blocks)
        self._next_slot = slot_id + 1
        slot = Slot(slot_id, tenant_id, program, plan, c, extent, budget,
                    ExtentIO(self.nvme, extent, source=slot_id))
        slot.helpers = storage_helpers(_route_root(slot))
        self.slots[slot_id] = slot
        if program.service == "kv":
            slot.tree = BTree()
            self._submit_job(slot, lambda: slot.tree.format(extent.block_count), None)
        log.info("tenant %d created slot %d on device %d blocks [%d, %d)",
                 tenant_id, slot_id, extent.device, extent.first_lba, extent.end_lba)
        return slot

    def delete_slot(self, tenant_id: int, auth_token: bytes, slot_id: int) -> None:
        self.authenticate(tenant_id, auth_token)
        slot = self.slots.get(slot_id)
        if slot is None or slot.tenant_id != tenant_id and tenant_id != ADMIN_TENANT:
            raise UnknownSlot(f"no slot {slot_id}")
        del self.slots[slot_id]
        slot.deleted = True
        while slot.queue:
            job = slot.queue.popleft()
            if job[0] is not None and job[4] is not None:
                job[4](job[0].error(Status.UNKNOWN_SLOT, f"slot {slot_id} deleted"))
        if not slot.busy:
            self._release(slot)

    def _release(self, slot: Slot) -> None:
        if self.zero_on_free:
            e = slot.extent
            for lba in range(e.first_lba, e.end_lba):
                self.nvme.poke(BlockAddress(e.device, lba), ZERO_BLOCK)

    def stats(self, slot_id: int) -> SlotStats:
        slot = self.slots.get(slot_id)
        if slot is None:
            raise UnknownSlot(f"no slot {slot_id}")
        s = slot.stats
        return SlotStats(s.requests, s.traps, s.busy_ns)

    def slot(self, slot_id: int) -> Slot:
        slot = self.slots.get(slot_id)
        if slot is None:
            raise UnknownSlot(f"no slot {slot_id}")
        return slot

    # -- execution -----------------------------------------------------------------------
    #
    # A job is (request, make_gen, finish, recv_ns, reply).  ``make_gen``
    # builds the block generator; ``finish(request, outcome, error)`` turns
    # its outcome into a response.  Maintenance jobs have no request and
    # hand the raw outcome to ``reply``.

    def _submit_job(self, slot: Slot, make_gen, reply, request: Message | None = None,
                    finish=None) -> None:
        job = (request, make_gen, finish, self.sim._now, reply)
        if slot.busy:
            if request is not None and len(slot.queue) >= self.queue_depth:
                reply(request.error(Status.SLOT_BUSY, f"slot {slot.slot_id} queue full"))
                return
            slot.queue.append(job)
            return
        self._start(slot, job)

    def _start(self, slot: Slot, job) -> None:
        request, make_gen, finish, recv_ns, reply = job
        slot.busy = True
        sim = self.sim
        start = sim._now

        def done(outcome: Any, error: BaseException | None = None) -> None:
            end = sim._now
            if request is not None:
                stats = slot.stats
                stats.requests += 1
                stats.busy_ns += end - start
                if self.intervals is not None:
                    self.intervals.append((slot.slot_id, start, end))
                r = finish(request, outcome, error)
                if r[3] == Status.TRAP:
                    stats.traps += 1
                if request[4] & FLAG_TIMESTAMPS:
                    r = _new_tuple(Message, (r[0], r[1], r[2], r[3], r[4], r[5],
                                             r[6] + _TRAILER_PACK(recv_ns, end)))
                reply(r)
            else:
                if error is not None:
                    log.error("slot %d maintenance job failed: %s", slot.slot_id, error)
                if reply is not None:
                    reply(outcome if error is None else error)
            slot.busy = False
            if slot.deleted:
                self._release(slot)
            elif slot.queue:
                self._start(slot, slot.queue.popleft())

        try:
            gen = make_gen()
        except (ValueError, SlotError) as err:
            done(None, err)
            return
        slot.io.run_async(gen, done)

    def submit_job(self, slot_id: int, make_gen: Callable[[], Any],
                   on_done: Callable[[Any], None] | None = None) -> None:
        """Queue a maintenance generator (bulk load, integrity scan) on a slot."""
        self._submit_job(self.slot(slot_id), make_gen, on_done)

    def run_job(self, slot_id: int, make_gen: Callable[[], Any]) -> Any:
        """Queue a maintenance job and run the simulator until it finishes."""
        box: list = []
        self.submit_job(slot_id, make_gen, box.append)
        self.sim.run_until(lambda: bool(box))
        if isinstance(box[0], BaseException):
            raise box[0]
        return box[0]

    def dispatch(self, request: Message, reply: Callable[[Message], None]) -> None:
        """Route a data request to its slot; ``reply`` receives exactly one response."""
        if self.dispatch_log is not None:
            self.dispatch_log.append((self.sim._now, request[5], request[1], request[2]))
        slot = self.slots.get(request[2])
        if slot is None or slot.tenant_id != request[1]:
            reply(request.error(Status.UNKNOWN_SLOT, f"no slot {request.slot_id} for tenant {request.tenant_id}"))
            return
        op = request[0]
        if slot.tree is not None and op != Opcode.RAW_DISPATCH and not (op == Opcode.GET and self.kv_get_via_ebpf):
            self._submit_job(slot, _kv_gen(slot.tree, op, request[6]), reply, request, _kv_finish)
        else:
            ctx = ExecutionContext(request[6], slot.helpers, self.fuel, self.sim.now, MAX_EMIT)
            self._submit_job(slot, partial(run, slot.program.verified, ctx), reply, request, _ebpf_finish)

    def dispatch_sync(self, request: Message) -> Message:
        box: list[Message] = []
        self.dispatch(request, box.append)
        self.sim.run_until(lambda: bool(box))
        return box[0]

    # -- wire entry point ------------------------------------------------------------

    def handle(self, request: Message, reply: Callable[[Message], None]) -> None:
        """Serve one decoded request; control ops reply synchronously."""
        op = request.opcode
        if op in wire.DATA_OPCODES:
            self.dispatch(request, reply)
            return
        if op not in wire.CONTROL_OPCODES:
            reply(request.reply(Status.UNKNOWN_OPCODE, f"unknown opcode {op:#04x}".encode(),
                                opcode=Opcode.ERROR_RESP))
            return
        try:
            reply(self._control(request))
        except SlotError as err:
            reply(request.error(err.status, str(err)))
        except (VerifierError, isa.DecodeError) as err:
            reply(request.error(Status.VERIFIER_ERROR, str(err)))
        except ValueError as err:
            reply(request.error(Status.BAD_REQUEST, str(err)))

    def _control(self, request: Message) -> Message:
        payload = request.payload
        if len(payload) < wire.TOKEN_SIZE:
            raise ValueError("control payload lacks the auth token")
        token, body = payload[:wire.TOKEN_SIZE], payload[wire.TOKEN_SIZE:]
        tenant = request.tenant_id
        op = request.opcode
        if op == Opcode.LOAD_PROG:
            return request.reply(Status.OK, wire.u32(self.load_image(tenant, token, body)))
        if op == Opcode.CREATE_SLOT:
            if len(body) != CREATE_ARGS.size:
                self.authenticate(tenant, token)
                raise ValueError("CREATE_SLOT takes program_id, blocks and budget (u32 each)")
            program_id, blocks, budget = CREATE_ARGS.unpack(body)
            slot = self.create_slot(tenant, token, program_id, blocks, budget)
            reply = request.reply(Status.OK, slot.info())
            return Message(reply.opcode, reply.tenant_id, slot.slot_id, reply.status,
                           reply.reserved, reply.request_id, reply.payload)
        if op == Opcode.DELETE_SLOT:
            self.delete_slot(tenant, token, request.slot_id)
            return request.reply(Status.OK)
        self.authenticate(tenant, token)
        slot = self.slots.get(request.slot_id)
        if slot is None or slot.tenant_id != tenant and tenant != ADMIN_TENANT:
            raise UnknownSlot(f"no slot {request.slot_id}")
        return request.reply(Status.OK, self.stats(request.slot_id).encode())
