"""Client library and load generator.

Clients do their own routing: the tenant and slot are chosen per request
(``key % len(slots)`` for sharded key-value workloads) and the daemon just
follows the address.

Latencies come from server-side virtual timestamps: the bench sets the
timestamp flag, the daemon appends ``(recv_ns, done_ns)`` and the client
adds the network RTT.  CSV trace columns are
``request_id,opcode,key,submit_ns,complete_ns,status``.

Timeouts are retried with a fresh request_id.  Retries are at-most-once per
request_id but not per operation: a PUT whose response was lost may apply
twice.
"""

from __future__ import annotations

import csv
import gc
import itertools
import math
import random
import select
import socket
import struct
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Callable, Iterable, NamedTuple

import yaml

from . import wire
from .programs import LOG_PATTERN, LOG_RECORD_SIZE
from .server import VirtualNetwork
from .simclock import Simulator
from .slots import SLOT_INFO, SlotStats
from .wire import FLAG_TIMESTAMPS, TIMESTAMP_TRAILER, Message, Opcode, Status

VALUE_SIZE = 128
_U64 = struct.Struct("<Q")


_new_tuple = tuple.__new__


class ClientError(Exception):
    def __init__(self, response: Message) -> None:
        super().__init__(f"{Status(response.status).name}: {response.detail}")
        self.response = response


class ClientTimeout(Exception):
    pass


class BenchAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class Response:
    message: Message
    latency_ns: int | None = None
    timestamps: tuple[int, int] | None = None

    @property
    def status(self) -> Status:
        return Status(self.message.status)

    @property
    def payload(self) -> bytes:
        return self.message.payload

    @property
    def ok(self) -> bool:
        return self.message.status == Status.OK


# -- transports ----------------------------------------------------------------------


class VirtualTransport:
    """Client end of a :class:`VirtualNetwork`; time is the simulator's."""

    def __init__(self, network: VirtualNetwork) -> None:
        self.network = network
        self.sim: Simulator = network.sim
        self.rtt_ns = network.rtt_ns

    def submit(self, msg: Message, callback: Callable[[Message], None]) -> None:
        if self.network.wire_format:
            self.network.send(msg.encode(), lambda data: callback(wire.decode(data)))
        else:
            self.network.send(msg, callback)

    def drain(self) -> None:
        self.sim.run()

    def call(self, msg: Message) -> tuple[Message, int]:
        box: list[Message] = []
        start = self.sim.now()
        self.submit(msg, box.append)
        self.sim.run_until(lambda: bool(box))
        return box[0], self.sim.now() - start


class UdpTransport:
    """Datagram socket to a running daemon."""

    def __init__(self, endpoint: tuple[str, int], rtt_ns: int = 1000, timeout_s: float = 1.0,
                 retries: int = 3) -> None:
        self.endpoint = endpoint
        self.rtt_ns = rtt_ns
        self.timeout_s = timeout_s
        self.retries = retries
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._pending: dict[int, tuple[Message, Callable, float, int]] = {}
        self._next_id = itertools.count(int(time.time() * 1e6) << 8)

    def fresh_id(self) -> int:
        return next(self._next_id) & ((1 << 64) - 1)

    def submit(self, msg: Message, callback: Callable[[Message], None]) -> None:
        self.sock.sendto(msg.encode(), self.endpoint)
        self._pending[msg.request_id] = (msg, callback, time.monotonic() + self.timeout_s, 0)

    def _poll(self) -> None:
        now = time.monotonic()
        deadline = min(p[2] for p in self._pending.values())
        ready, _, _ = select.select([self.sock], [], [], max(0.0, deadline - now))
        if ready:
            data, _ = self.sock.recvfrom(wire.HEADER_SIZE + wire.MAX_PAYLOAD + 64)
            try:
                resp = wire.decode(data)
            except wire.ProtocolError:
                return
            entry = self._pending.pop(resp.request_id, None)
            if entry is not None:
                entry[1](resp)
            return
        now = time.monotonic()
        for rid, (msg, cb, due, attempts) in list(self._pending.items()):
            if due > now:
                continue
            del self._pending[rid]
            if attempts >= self.retries:
                raise ClientTimeout(f"no response to request after {attempts + 1} attempts")
            retry = Message(msg.opcode, msg.tenant_id, msg.slot_id, msg.status, msg.reserved,
                            self.fresh_id(), msg.payload)
            self.sock.sendto(retry.encode(), self.endpoint)
            self._pending[retry.request_id] = (retry, cb, now + self.timeout_s, attempts + 1)

    def drain(self) -> None:
        while self._pending:
            self._poll()

    def call(self, msg: Message) -> tuple[Message, int | None]:
        box: list[Message] = []
        self.submit(msg, box.append)
        while not box:
            self._poll()
        return box[0], None

    def close(self) -> None:
        self.sock.close()


# -- client --------------------------------------------------------------------------


class Client:
    def __init__(self, transport, tenant_id: int, token: bytes | None = None) -> None:
        self.transport = transport
        self.tenant_id = tenant_id
        self.token = token
        self._ids = itertools.count(1)
        fresh = getattr(transport, "fresh_id", None)
        self.request_id: Callable[[], int] = fresh if fresh is not None else self._ids.__next__

    def message(self, opcode: int, slot: int, payload: bytes = b"", flags: int = FLAG_TIMESTAMPS) -> Message:
        return _new_tuple(Message, (opcode, self.tenant_id, slot, 0, flags, self.request_id(), payload))

    def call(self, opcode: int, slot: int, payload: bytes = b"", flags: int = FLAG_TIMESTAMPS) -> Response:
        msg, elapsed = self.transport.call(self.message(opcode, slot, payload, flags))
        body, stamps = wire.split_timestamps(msg)
        latency = elapsed
        if stamps is not None:
            latency = stamps[1] - stamps[0] + self.transport.rtt_ns
        return Response(body, latency, stamps)

    # data path

    def get(self, slot: int, key: int) -> Response:
        return self.call(Opcode.GET, slot, wire.key_payload(key))

    def put(self, slot: int, key: int, value: bytes) -> Response:
        return self.call(Opcode.PUT, slot, wire.put_payload(key, pad_value(value)))

    def delete(self, slot: int, key: int) -> Response:
        return self.call(Opcode.DEL, slot, wire.key_payload(key))

    def raw(self, slot: int, payload: bytes) -> Response:
        """RAW_DISPATCH; an OK payload is ``r0 u64`` followed by emitted bytes."""
        return self.call(Opcode.RAW_DISPATCH, slot, payload)

    # control path

    def _token(self) -> bytes:
        if self.token is None:
            raise ValueError("control operations need an auth token")
        return self.token

    def _control(self, opcode: int, slot: int, body: bytes = b"") -> Message:
        resp = self.call(opcode, slot, self._token() + body, flags=0).message
        if resp.status != Status.OK:
            raise ClientError(resp)
        return resp

    def load_program(self, image: bytes) -> int:
        resp = self._control(Opcode.LOAD_PROG, 0, bytes(image))
        return struct.unpack_from("<I", resp.payload)[0]

    def create_slot(self, program_id: int, blocks: int, budget: int = 256) -> dict:
        resp = self._control(Opcode.CREATE_SLOT, 0, struct.pack("<III", program_id, blocks, budget))
        slot_id, device, first, count, units, stages = SLOT_INFO.unpack_from(resp.payload)
        return {"slot_id": slot_id, "device": device, "first_lba": first, "block_count": count,
                "logic_units": units, "stage_count": stages}

    def delete_slot(self, slot: int) -> None:
        self._control(Opcode.DELETE_SLOT, slot)

    def stats(self, slot: int) -> SlotStats:
        return SlotStats.decode(self._control(Opcode.STATS, slot).payload)


def pad_value(value: bytes) -> bytes:
    if len(value) > VALUE_SIZE:
        raise ValueError(f"values are at most {VALUE_SIZE} bytes")
    return bytes(value) + bytes(VALUE_SIZE - len(value))


def value_for(key: int) -> bytes:
    """Deterministic 128-byte value used by preloads and benches."""
    return _U64.pack(key) * (VALUE_SIZE // 8)


# -- workloads ------------------------------------------------------------------------

KINDS = ("kv-uniform", "kv-zipf", "pointer-chase", "log-filter")


@dataclass
class WorkloadSpec:
    kind: str = "kv-uniform"
    op_mix: dict[str, float] = field(default_factory=lambda: {"get": 1.0})
    key_space: int = 100_000
    op_count: int = 10_000
    concurrency: int = 1
    theta: float = 0.99
    depth: int = 5
    slots: list[int] = field(default_factory=lambda: [1])
    pin_workers: bool = False
    seed: int = 0
    trace_path: str | None = None
    max_error_rate: float = 0.01

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if set(self.op_mix) - {"get", "put", "delete"}:
            raise ValueError("op_mix keys are get, put and delete")
        if any(v < 0 for v in self.op_mix.values()) or not math.isclose(sum(self.op_mix.values()), 1.0):
            raise ValueError("op_mix fractions must be non-negative and sum to 1")
        if self.concurrency < 1:
            raise ValueError("concurrency must be at least 1")
        if self.key_space < 1 or self.op_count < 0 or not self.slots:
            raise ValueError("key_space >= 1, op_count >= 0 and at least one slot required")
        if self.pin_workers and self.key_space < len(self.slots):
            raise ValueError("pinned workers need at least one key per slot")

    @classmethod
    def from_dict(cls, data: dict) -> WorkloadSpec:
        return cls(**data)

    @classmethod
    def load(cls, path: str) -> WorkloadSpec:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


class _KeyChooser:
    def __init__(self, spec: WorkloadSpec, rng: random.Random) -> None:
        self.spec = spec
        self.rng = rng
        self.nslots = len(spec.slots)
        self._zipf: dict[int, list[float]] = {}
        self._draw = rng.random
        self._uniform = spec.kind != "kv-zipf"
        space, n = spec.key_space, self.nslots
        # worker w owns the keys congruent to w modulo the slot count
        self._shards = [(shard, (space - shard + n - 1) // n) for shard in range(n)]

    def _rank(self, n: int) -> int:
        if self.spec.kind != "kv-zipf":
            return int(self._draw() * n)
        cum = self._zipf.get(n)
        if cum is None:
            theta = self.spec.theta
            cum = list(itertools.accumulate(1.0 / (i ** theta) for i in range(1, n + 1)))
            self._zipf[n] = cum
        return self.rng.choices(range(n), cum_weights=cum)[0]

    def key(self, worker: int) -> int:
        if not self.spec.pin_workers:
            return self._rank(self.spec.key_space)
        nslots = self.nslots
        shard, span = self._shards[worker % nslots]
        if self._uniform:
            return shard + nslots * int(self._draw() * span)
        return shard + nslots * self._rank(span)


def synthetic_log_record(rng: random.Random, fail: bool) -> bytes:
    user = rng.choice(["alice", "bob", "carol", "dave", "erin"])
    ip = ".".join(str(rng.randrange(256)) for _ in range(4))
    verb = "auth-fail" if fail else rng.choice(["auth-ok", "session", "logout"])
    line = f"sshd {verb} user={user} src={ip}".encode()
    return line[:LOG_RECORD_SIZE].ljust(LOG_RECORD_SIZE, b" ")


@dataclass(frozen=True)
class BenchReport:
    ops: int
    errors: int
    duration_ns: int
    throughput: float
    mean_us: float
    p50_us: float
    p90_us: float
    p99_us: float
    max_us: float
    concurrency: int
    littles_ratio: float
    trace_path: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def lines(self) -> list[str]:
        return [
            f"ops={self.ops} errors={self.errors} duration_us={self.duration_ns / 1000:.3f}",
            f"throughput={self.throughput:.1f} ops/s",
            f"latency_us p50={self.p50_us:.3f} p90={self.p90_us:.3f} p99={self.p99_us:.3f} "
            f"max={self.max_us:.3f} mean={self.mean_us:.3f}",
            f"littles_law throughput*mean/concurrency={self.littles_ratio:.4f}",
        ]


def percentile(sorted_values: list[int], p: float) -> int:
    """Nearest-rank percentile."""
    if not sorted_values:
        return 0
    rank = max(1, math.ceil(p / 100 * len(sorted_values)))
    return sorted_values[rank - 1]


class OpRecord(NamedTuple):
    request_id: int
    opcode: int
    key: int
    submit_ns: int
    complete_ns: int
    status: int


def bench(spec: WorkloadSpec, client: Client) -> BenchReport:
    """Closed loop: ``concurrency`` workers, each with one request outstanding."""
    rng = random.Random(f"{spec.seed}/workload")
    chooser = _KeyChooser(spec, rng)
    ops = [op for op, frac in sorted(spec.op_mix.items()) if frac > 0]
    weights = list(itertools.accumulate(spec.op_mix[op] for op in ops))
    rtt = client.transport.rtt_ns
    up = rtt // 2
    down = rtt - up
    slots = spec.slots
    records: list[OpRecord] = []
    state = {"issued": 0, "errors": 0, "aborted": False}

    kind = spec.kind
    single_op = ops[0] if len(ops) == 1 else None
    key_for = chooser.key
    message = client.message
    submit = client.transport.submit
    unpack_stamps = TIMESTAMP_TRAILER.unpack_from
    record = records.append
    ok = (Status.OK, Status.NOT_FOUND)
    pack = _U64.pack
    nslots = len(slots)

    def build(worker: int) -> tuple[Message, int]:
        key = key_for(worker)
        slot = slots[key % nslots]
        if kind == "pointer-chase":
            return message(Opcode.RAW_DISPATCH, slot, pack(key) + pack(spec.depth)), key
        if kind == "log-filter":
            entry = synthetic_log_record(rng, rng.random() < 0.1)
            return message(Opcode.RAW_DISPATCH, slot, entry), key
        op = single_op or rng.choices(ops, cum_weights=weights)[0]
        if op == "get":
            return message(Opcode.GET, slot, pack(key)), key
        if op == "put":
            return message(Opcode.PUT, slot, pack(key) + value_for(key)), key
        return message(Opcode.DEL, slot, pack(key)), key

    def issue(worker: int) -> None:
        if state["issued"] >= spec.op_count or state["aborted"]:
            return
        state["issued"] += 1
        msg, key = build(worker)
        submit(msg, partial(on_reply, worker, msg, key))

    def on_reply(worker: int, msg: Message, key: int, resp: Message) -> None:
        payload = resp[6]
        cut = len(payload) - TIMESTAMP_TRAILER.size
        if not resp[4] & FLAG_TIMESTAMPS or cut < 0:
            raise BenchAborted("daemon did not return server timestamps")
        recv_ns, done_ns = unpack_stamps(payload, cut)
        status = resp[3]
        record(_new_tuple(OpRecord, (msg[5], msg[0], key, recv_ns - up, done_ns + down, status)))
        if status not in ok:
            state["errors"] += 1
            done = len(records)
            if done >= 100 and state["errors"] > spec.max_error_rate * done:
                state["aborted"] = True
        issue(worker)

    # the loop allocates no cycles; pausing the collector keeps its cost out
    # of long runs, as timeit does
    collecting = gc.isenabled()
    gc.disable()
    try:
        for worker in range(min(spec.concurrency, spec.op_count)):
            issue(worker)
        client.transport.drain()
    finally:
        if collecting:
            gc.enable()
    if state["aborted"]:
        raise BenchAborted(f"error rate above {spec.max_error_rate:.0%} ({state['errors']} of {len(records)})")
    if spec.trace_path:
        write_trace(spec.trace_path, records)
    return summarize(records, spec.concurrency, spec.trace_path)


def preload(client: Client, slots: list[int], key_space: int, concurrency: int = 16) -> int:
    """PUT ``value_for(k)`` for every key, routed by ``k % len(slots)``; returns failures."""
    keys = iter(range(key_space))
    failures = 0

    def issue() -> None:
        key = next(keys, None)
        if key is None:
            return
        msg = client.message(Opcode.PUT, slots[key % len(slots)], wire.put_payload(key, value_for(key)), 0)
        client.transport.submit(msg, done)

    def done(resp: Message) -> None:
        nonlocal failures
        failures += resp.status != Status.OK
        issue()

    for _ in range(max(1, concurrency)):
        issue()
    client.transport.drain()
    return failures


def summarize(records: Iterable[OpRecord], concurrency: int, trace_path: str | None = None) -> BenchReport:
    records = list(records)
    if not records:
        return BenchReport(0, 0, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, concurrency, 0.0, trace_path)
    lat = sorted(r.complete_ns - r.submit_ns for r in records)
    duration = max(r.complete_ns for r in records) - min(r.submit_ns for r in records)
    throughput = len(records) / duration * 1e9 if duration > 0 else float("inf")
    mean = sum(lat) / len(lat)
    errors = sum(1 for r in records if r.status not in (Status.OK, Status.NOT_FOUND))
    return BenchReport(
        ops=len(records),
        errors=errors,
        duration_ns=duration,
        throughput=throughput,
        mean_us=mean / 1000,
        p50_us=percentile(lat, 50) / 1000,
        p90_us=percentile(lat, 90) / 1000,
        p99_us=percentile(lat, 99) / 1000,
        max_us=lat[-1] / 1000,
        concurrency=concurrency,
        littles_ratio=throughput * mean * 1e-9 / concurrency,
        trace_path=trace_path,
    )


TRACE_FIELDS = ("request_id", "opcode", "key", "submit_ns", "complete_ns", "status")


def write_trace(path: str, records: Iterable[OpRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for r in records:
            writer.writerow(_row(r))


def _row(r: OpRecord) -> tuple:
    return (r.request_id, r.opcode, r.key, r.submit_ns, r.complete_ns, r.status)


# -- application demos -----------------------------------------------------------------


def chase(client: Client, slot: int, start: int, depth: int) -> tuple[int, int]:
    """Offloaded pointer chase; returns (final block, end-to-end latency ns)."""
    resp = client.raw(slot, _U64.pack(start) + _U64.pack(depth))
    if not resp.ok:
        raise ClientError(resp.message)
    r0 = _U64.unpack_from(resp.payload, 0)[0]
    if r0 != 0:
        raise ValueError(f"chase program returned {r0}")
    return _U64.unpack_from(resp.payload, 8)[0], resp.latency_ns


def client_side_chase(client: Client, slot: int, start: int, depth: int) -> tuple[int, int]:
    """The same chase done as ``depth`` one-hop round trips from the client."""
    total = 0
    block = start
    for _ in range(depth):
        block, latency = chase(client, slot, block, 1)
        total += latency
    return block, total


@dataclass(frozen=True)
class LogFilterReport:
    records: int
    matches: int
    expected_matches: int
    persisted: tuple[bytes, ...]
    verified: bool


def read_log_records(path: str) -> list[bytes]:
    """One record per non-empty line, cut or space-padded to 64 bytes."""
    out = []
    with open(path, "rb") as fh:
        for line in fh:
            line = line.rstrip(b"\r\n")
            if line:
                out.append(line[:LOG_RECORD_SIZE].ljust(LOG_RECORD_SIZE, b" "))
    return out


def reference_filter(records: Iterable[bytes]) -> list[bytes]:
    return [r for r in records if LOG_PATTERN in r]


def logfilter_demo(client: Client, slot: int, records: Iterable[bytes]) -> LogFilterReport:
    records = list(records)
    matches = 0
    for record in records:
        if len(record) != LOG_RECORD_SIZE:
            raise ValueError(f"log records are {LOG_RECORD_SIZE} bytes")
        resp = client.raw(slot, record)
        if not resp.ok:
            raise ClientError(resp.message)
        matches += _U64.unpack_from(resp.payload, 0)[0] == 1
    count_resp = client.raw(slot, b"")
    if not count_resp.ok:
        raise ClientError(count_resp.message)
    stored = _U64.unpack_from(count_resp.payload, 8)[0]
    persisted = []
    for i in range(stored):
        resp = client.raw(slot, _U64.pack(i))
        if not resp.ok:
            raise ClientError(resp.message)
        persisted.append(bytes(resp.payload[8:8 + LOG_RECORD_SIZE]))
    expected = reference_filter(records)
    verified = matches == len(expected) and persisted[len(persisted) - matches:] == expected
    return LogFilterReport(len(records), matches, len(expected), tuple(persisted), bool(verified))
