"""Network front ends for a :class:`~hyperion.slots.SlotManager`.

:class:`VirtualNetwork` is the pure-virtual transport: each direction costs
half the configured round-trip time in simulator time.  :class:`DatagramServer`
is the daemon loop over a real UDP socket; there the network is real and the
RTT only enters reported latencies.

Routing is passive: a request goes to exactly the ``(tenant_id, slot_id)``
it names, or is answered with UnknownSlot.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

from . import wire
from .config import Config
from .nvme import NvmeSubsystem
from .simclock import Simulator
from .slots import SlotManager
from .wire import Message, ProtocolError, Status

log = logging.getLogger(__name__)

MAX_DATAGRAM = wire.HEADER_SIZE + wire.MAX_PAYLOAD


class VirtualNetwork:
    """In-process datagram link between clients and one manager.

    With ``wire_format=True`` every message crosses as encoded bytes, so the
    codec and malformed-datagram handling are exercised; otherwise
    :class:`Message` objects are passed as-is.
    """

    def __init__(self, sim: Simulator, manager: SlotManager, rtt_ns: int, wire_format: bool = False) -> None:
        self.sim = sim
        self.manager = manager
        self.rtt_ns = rtt_ns
        self.up_ns = rtt_ns // 2
        self.down_ns = rtt_ns - self.up_ns
        self.wire_format = wire_format
        self.dropped = 0
        self.delivered = 0

    def send(self, request: Message | bytes, on_reply: Callable) -> None:
        if self.wire_format and isinstance(request, Message):
            request = request.encode()
        self.sim.schedule(self.up_ns, self._deliver, request, on_reply)

    def _deliver(self, request: Message | bytes, on_reply: Callable) -> None:
        if type(request) is Message:
            self.delivered += 1
            # responses travel back on the down leg
            self.manager.handle(request, partial(self.sim.schedule, self.down_ns, on_reply))
            return
        try:
            msg = wire.decode(request)
        except ProtocolError as err:
            if err.header is None:
                self.dropped += 1
                return
            self._respond(err.header.error(Status.BAD_REQUEST, err.detail), on_reply)
            return
        self.delivered += 1
        self.manager.handle(msg, lambda resp: self._respond(resp, on_reply))

    def _respond(self, response: Message, on_reply: Callable) -> None:
        self.sim.schedule(self.down_ns, on_reply, response.encode())


@dataclass
class Emulator:
    """One DPU: simulator, devices, slot manager and the virtual network."""

    config: Config
    sim: Simulator = field(init=False)
    nvme: NvmeSubsystem = field(init=False)
    manager: SlotManager = field(init=False)
    network: VirtualNetwork = field(init=False)
    access_log: bool = False
    wire_format: bool = False
    record_intervals: bool = False
    record_dispatch: bool = False

    def __post_init__(self) -> None:
        cfg = self.config
        latency = cfg.latency.model()
        self.sim = Simulator(cfg.sim.seed, mode=cfg.sim.mode, realtime_scale=cfg.sim.realtime_scale)
        self.nvme = NvmeSubsystem(self.sim, cfg.devices.device_config(), latency, access_log=self.access_log)
        self.manager = SlotManager(
            self.sim, self.nvme, cfg.tenants,
            queue_depth=cfg.slot.queue_depth,
            zero_on_free=cfg.slot.zero_on_free,
            lane_width=cfg.slot.lane_width,
            kv_get_via_ebpf=cfg.slot.kv_get_via_ebpf,
            record_intervals=self.record_intervals,
            record_dispatch=self.record_dispatch,
        )
        self.network = VirtualNetwork(self.sim, self.manager, latency.net_rtt_ns, self.wire_format)

    @property
    def rtt_ns(self) -> int:
        return self.network.rtt_ns

    def close(self) -> None:
        self.nvme.close()


class DatagramServer:
    """UDP daemon loop.

    Each wake-up drains the socket, injects every request at the current
    virtual time, runs the simulator until idle and sends the responses.
    """

    def __init__(self, emulator: Emulator, bind: tuple[str, int]) -> None:
        self.emulator = emulator
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(bind)
        self.address = self.sock.getsockname()
        self.dropped = 0
        self.served = 0
        self._stop = threading.Event()
        self._idle = threading.Event()
        self._idle.set()

    def serve_once(self, timeout: float = 0.05) -> int:
        sock = self.sock
        sock.settimeout(timeout)
        batch: list[tuple[bytes, tuple]] = []
        try:
            batch.append(sock.recvfrom(MAX_DATAGRAM + 1))
        except (TimeoutError, socket.timeout):
            return 0
        sock.setblocking(False)
        try:
            while True:
                batch.append(sock.recvfrom(MAX_DATAGRAM + 1))
        except BlockingIOError:
            pass
        outbox: list[tuple[bytes, tuple]] = []
        manager = self.emulator.manager
        for data, addr in batch:
            try:
                msg = wire.decode(data)
            except ProtocolError as err:
                if err.header is None:
                    self.dropped += 1
                    log.debug("dropped undecodable datagram from %s: %s", addr, err.detail)
                else:
                    outbox.append((err.header.error(Status.BAD_REQUEST, err.detail).encode(), addr))
                continue
            manager.handle(msg, lambda resp, addr=addr: outbox.append((resp.encode(), addr)))
        self.emulator.sim.run()
        for payload, addr in outbox:
            sock.sendto(payload, addr)
        self.served += len(outbox)
        return len(outbox)

    def serve_forever(self) -> None:
        log.info("serving on %s:%d", *self.address)
        self._idle.clear()
        try:
            while not self._stop.is_set():
                self.serve_once()
        finally:
            self._idle.set()

    def stop(self) -> None:
        self._stop.set()

    def close(self) -> None:
        """Stop the loop, wait for it to leave the socket, then close it."""
        self.stop()
        self._idle.wait(timeout=5.0)
        self.sock.close()


def serve(config: Config, bind: tuple[str, int] | None = None) -> None:
    """Run the daemon until interrupted."""
    emulator = Emulator(config)
    server = DatagramServer(emulator, bind or config.bind_address())
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
        emulator.close()
