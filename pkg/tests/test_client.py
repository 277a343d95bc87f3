from __future__ import annotations

import csv
import random
import struct

import pytest
from conftest import TOKEN_A, make_config
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperion.client import (
    TRACE_FIELDS, BenchAborted, Client, ClientError, VirtualTransport, WorkloadSpec, bench, chase,
    client_side_chase, logfilter_demo, percentile, preload, reference_filter, synthetic_log_record,
    value_for,
)
from hyperion.server import Emulator
from hyperion.testbed import blocks_for, keys_for_height, kv_testbed
from hyperion.wire import Status


def test_put_get_delete_cycle(emulator):
    client = Client(VirtualTransport(emulator.network), 1, TOKEN_A)
    slot = client.create_slot(emulator.manager.builtins["kv-btree"], 64, budget=512)["slot_id"]
    assert client.put(slot, 7, b"x" * 128).payload == b"\x01"
    got = client.get(slot, 7)
    assert got.ok and got.payload == b"x" * 128
    assert client.get(slot, 8).status == Status.NOT_FOUND
    assert client.delete(slot, 7).ok
    assert client.get(slot, 7).status == Status.NOT_FOUND
    # short values are zero padded
    client.put(slot, 9, b"abc")
    assert client.get(slot, 9).payload == b"abc" + bytes(125)


def test_control_errors_raise(emulator):
    bad = Client(VirtualTransport(emulator.network), 1, bytes(32))
    with pytest.raises(ClientError) as info:
        bad.load_program(b"\x00" * 8)
    assert info.value.response.status == Status.AUTH_FAILED
    with pytest.raises(ValueError):
        Client(VirtualTransport(emulator.network), 1).stats(1)


def test_stats_on_fresh_slot(emulator):
    client = Client(VirtualTransport(emulator.network), 1, TOKEN_A)
    slot = client.create_slot(emulator.manager.builtins["echo"], 1)["slot_id"]
    s = client.stats(slot)
    assert (s.requests, s.traps, s.busy_ns) == (0, 0, 0)


def test_bench_concurrency_one_fixed_max():
    bed = kv_testbed(make_config("fixed-max"), height=3)
    spec = WorkloadSpec(key_space=bed.key_space, op_count=2000, slots=bed.slots)
    r = bench(spec, bed.client)
    assert r.ops == 2000 and r.errors == 0
    assert r.p50_us == r.max_us == 25.0
    assert r.throughput == pytest.approx(40_000, rel=1e-9)
    assert r.littles_ratio == pytest.approx(1.0, rel=1e-9)


def test_bench_littles_law_self_check():
    bed = kv_testbed(make_config(seed=3), slots=4, height=2)
    spec = WorkloadSpec(key_space=bed.key_space, op_count=20_000, concurrency=16, slots=bed.slots,
                        pin_workers=True)
    r = bench(spec, bed.client)
    assert abs(r.littles_ratio - 1.0) < 0.10
    assert r.p50_us <= r.p90_us <= r.p99_us <= r.max_us


def test_bench_is_reproducible(tmp_path):
    out = []
    for run in range(2):
        bed = kv_testbed(make_config(seed=5), slots=2, height=2)
        trace = tmp_path / f"trace{run}.csv"
        spec = WorkloadSpec(kind="kv-zipf", op_mix={"get": 0.8, "put": 0.2}, key_space=bed.key_space,
                            op_count=3000, concurrency=8, slots=bed.slots, seed=9, trace_path=str(trace))
        out.append((bench(spec, bed.client), trace.read_bytes()))
    (r1, t1), (r2, t2) = out
    assert r1.to_dict() | {"trace_path": None} == r2.to_dict() | {"trace_path": None}
    assert t1 == t2
    rows = list(csv.reader(t1.decode().splitlines()))
    assert tuple(rows[0]) == TRACE_FIELDS and len(rows) == 3001
    assert all(int(r[4]) > int(r[3]) for r in rows[1:])


def test_bench_aborts_on_errors(emulator):
    client = Client(VirtualTransport(emulator.network), 1, TOKEN_A)
    spec = WorkloadSpec(key_space=100, op_count=500, slots=[77])
    with pytest.raises(BenchAborted):
        bench(spec, client)


def test_preload_then_read_back(emulator):
    client = Client(VirtualTransport(emulator.network), 1, TOKEN_A)
    kv = emulator.manager.builtins["kv-btree"]
    slots = [client.create_slot(kv, 64, budget=512)["slot_id"] for _ in range(2)]
    assert preload(client, slots, 200) == 0
    for k in (0, 1, 199):
        assert client.get(slots[k % 2], k).payload == value_for(k)
    assert client.get(slots[1], 0).status == Status.NOT_FOUND


@pytest.mark.parametrize("kwargs", [
    {"kind": "kv-normal"}, {"op_mix": {"get": 0.5}}, {"op_mix": {"scan": 1.0}},
    {"op_mix": {"get": 1.5, "put": -0.5}}, {"concurrency": 0}, {"key_space": 0}, {"slots": []},
])
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        WorkloadSpec(**kwargs)


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=200))
@settings(max_examples=200)
def test_percentiles_are_members_and_ordered(values):
    values.sort()
    ps = [percentile(values, p) for p in (50, 90, 99, 100)]
    assert ps == sorted(ps) and all(p in values for p in ps) and ps[-1] == values[-1]


def test_nearest_rank_percentile():
    assert percentile(list(range(1, 101)), 50) == 50
    assert percentile(list(range(1, 101)), 99) == 99
    assert percentile([], 50) == 0


def _chase_slot(emu: Emulator, client: Client, blocks: int = 32) -> int:
    info = client.create_slot(emu.manager.builtins["chase"], blocks)
    for i in range(blocks):
        block = struct.pack("<Q", (i + 1) % blocks) + bytes(4088)
        emu.nvme.poke((info["device"], info["first_lba"] + i), block)
    return info["slot_id"]


@pytest.mark.parametrize("distribution,read_ns", [("fixed-max", 8000), ("fixed-min", 5000)])
def test_offloaded_chase_saves_four_round_trips(distribution, read_ns):
    emu = Emulator(make_config(distribution))
    client = Client(VirtualTransport(emu.network), 1, TOKEN_A)
    slot = _chase_slot(emu, client)
    end, offload = chase(client, slot, 3, 5)
    end2, manual = client_side_chase(client, slot, 3, 5)
    assert end == end2 == 8
    rtt = emu.rtt_ns
    assert manual - offload == 4 * rtt
    assert (offload, manual) == (rtt + 5 * read_ns, 5 * (rtt + read_ns))


def test_logfilter_persists_matching_records(emulator):
    client = Client(VirtualTransport(emulator.network), 1, TOKEN_A)
    slot = client.create_slot(emulator.manager.builtins["logfilter"], 32)["slot_id"]
    rng = random.Random(3)
    records = [synthetic_log_record(rng, i in (1, 4, 8)) for i in range(10)]
    report = logfilter_demo(client, slot, records)
    assert (report.records, report.matches, report.expected_matches) == (10, 3, 3)
    assert list(report.persisted) == reference_filter(records) and report.verified


def test_logfilter_empty_input(emulator):
    client = Client(VirtualTransport(emulator.network), 1, TOKEN_A)
    slot = client.create_slot(emulator.manager.builtins["logfilter"], 32)["slot_id"]
    report = logfilter_demo(client, slot, [])
    assert (report.matches, report.persisted, report.verified) == (0, (), True)


def test_testbed_sizes():
    assert keys_for_height(1) == 15 and keys_for_height(2) == 30 and keys_for_height(3) == 3840
    for h in (1, 2, 3):
        bed = kv_testbed(make_config(), height=h)
        assert bed.height(bed.slots[0]) == h
    assert blocks_for(3840) < 1000
