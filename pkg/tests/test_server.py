from __future__ import annotations

import struct
import threading

import pytest
from conftest import TOKEN_A, make_config

from hyperion.client import Client, UdpTransport, VirtualTransport, WorkloadSpec, bench, value_for
from hyperion.server import DatagramServer, Emulator
from hyperion.testbed import kv_testbed
from hyperion.wire import MAGIC, Message, Opcode, Status, decode, key_payload


@pytest.mark.parametrize("height,expected_ns", [(3, 25_000), (2, 17_000), (1, 9_000)])
def test_fixed_max_get_latency_is_rtt_plus_eight_per_level(height, expected_ns):
    bed = kv_testbed(make_config("fixed-max"), height=height)
    assert bed.height(bed.slots[0]) == height
    sim = bed.emulator.sim
    for key in (0, bed.key_space // 2, bed.key_space - 1):
        start = sim.now()
        resp = bed.client.get(bed.slots[0], key)
        assert resp.ok and resp.payload == value_for(key)
        assert resp.latency_ns == expected_ns
        assert sim.now() - start == expected_ns


def test_uniform_mean_end_to_end_latency():
    bed = kv_testbed(make_config(seed=21), height=3)
    spec = WorkloadSpec(key_space=bed.key_space, op_count=20_000, slots=bed.slots, seed=2)
    report = bench(spec, bed.client)
    assert abs(report.mean_us - 20.5) / 20.5 < 0.02
    assert 19.0 <= report.p50_us <= 22.0 and report.max_us <= 25.0


def test_unknown_slot(emulator):
    client = Client(VirtualTransport(emulator.network), 1, TOKEN_A)
    resp = client.get(999, 7)
    assert resp.status == Status.UNKNOWN_SLOT and resp.message.detail


def test_unknown_opcode_gets_error_response(emulator):
    client = Client(VirtualTransport(emulator.network), 1, TOKEN_A)
    resp = client.call(0x55, 1)
    assert resp.message.opcode == Opcode.ERROR_RESP and resp.status == Status.UNKNOWN_OPCODE


def test_every_request_gets_exactly_one_response_with_its_id(emulator):
    manager = emulator.manager
    slots = [manager.create_slot(1, TOKEN_A, manager.builtins["echo"], 1).slot_id for _ in range(3)]
    replies: list[Message] = []
    for rid in range(300):
        msg = Message(Opcode.RAW_DISPATCH, 1, slots[rid % 3] if rid % 7 else 4242, request_id=rid,
                      payload=bytes([rid % 256]))
        emulator.network.send(msg, replies.append)
    emulator.sim.run()
    assert sorted(r.request_id for r in replies) == list(range(300))
    for r in replies:
        if r.request_id % 7:
            assert r.status == Status.OK and r.payload[8:] == bytes([r.request_id % 256])
        else:
            assert r.status == Status.UNKNOWN_SLOT
    logged = [(rid, sid) for _, rid, _, sid in manager.dispatch_log]
    assert sorted(logged) == sorted((r.request_id, r.slot_id) for r in replies)


def test_malformed_datagrams_on_the_virtual_wire():
    emu = Emulator(make_config(), wire_format=True)
    replies: list[bytes] = []
    emu.network.send(b"\x00" * 30, replies.append)                      # bad magic: dropped
    emu.network.send(b"short", replies.append)                          # no header: dropped
    bad_version = struct.pack("<IBBHHBBQI", MAGIC, 9, 1, 1, 1, 0, 0, 77, 0)
    emu.network.send(bad_version, replies.append)                      # answered
    emu.sim.run()
    assert emu.network.dropped == 2
    (only,) = replies
    resp = decode(only)
    assert resp.status == Status.BAD_REQUEST and resp.request_id == 77


def test_wire_format_round_trip_end_to_end():
    bed = kv_testbed(make_config("fixed-max"), height=2, wire_format=True)
    resp = bed.client.get(bed.slots[0], 5)
    assert resp.ok and resp.payload == value_for(5) and resp.latency_ns == 17_000


@pytest.fixture
def udp_server():
    emu = Emulator(make_config("fixed-max"))
    server = DatagramServer(emu, ("127.0.0.1", 0))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield emu, server
    server.close()
    thread.join(timeout=2)
    emu.close()


def test_udp_round_trip(udp_server):
    emu, server = udp_server
    transport = UdpTransport(server.address, rtt_ns=1000, timeout_s=1.0)
    client = Client(transport, 1, TOKEN_A)
    try:
        info = client.create_slot(emu.manager.builtins["kv-btree"], 64, budget=512)
        assert client.put(info["slot_id"], 7, b"x" * 128).ok
        resp = client.get(info["slot_id"], 7)
        assert resp.ok and resp.payload == b"x" * 128
        # root-only tree: one 8us read plus the 1us RTT
        assert resp.latency_ns == 9_000
        assert client.get(info["slot_id"], 8).status == Status.NOT_FOUND
        transport.sock.sendto(b"garbage", server.address)
        assert client.stats(info["slot_id"]).requests == 3
        assert server.dropped == 1
    finally:
        transport.close()


def test_udp_get_message_bytes(udp_server):
    _, server = udp_server
    transport = UdpTransport(server.address)
    try:
        resp, _ = transport.call(Message(Opcode.GET, 1, 999, request_id=5, payload=key_payload(1)))
        assert resp.status == Status.UNKNOWN_SLOT and resp.request_id == 5
    finally:
        transport.close()
