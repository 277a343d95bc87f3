from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperion.nvme import (
    BLOCK_SIZE, ZERO_BLOCK, AddressOutOfRange, BlockAddress, Command, DeviceConfig, NvmeSubsystem,
    QueueFull,
)
from hyperion.simclock import LatencyModel, Simulator


def subsystem(distribution: str = "uniform", seed: int = 0, **config) -> NvmeSubsystem:
    sim = Simulator(seed)
    return NvmeSubsystem(sim, DeviceConfig(**config), LatencyModel(distribution=distribution), sample_log=True)


def block(fill: int) -> bytes:
    return bytes([fill]) * BLOCK_SIZE


def test_read_after_write():
    nvme = subsystem()
    nvme.write_block_sync((0, 7), block(0xAB))
    assert nvme.read_block_sync((0, 7)) == block(0xAB)


def test_never_written_block_reads_as_zeros():
    assert subsystem().read_block_sync((2, 99)) == ZERO_BLOCK


def test_seventeenth_submit_to_depth_16_queue_is_refused():
    nvme = subsystem()
    for lba in range(16):
        nvme.submit(0, Command.read(0, lba))
    with pytest.raises(QueueFull):
        nvme.submit(0, Command.read(0, 16))
    # other devices are unaffected
    nvme.submit(1, Command.read(1, 0))


@pytest.mark.parametrize("addr", [(4, 0), (0, 65536), (-1, 0), (0, -1)])
def test_out_of_range_addresses_are_rejected_without_state_change(addr):
    nvme = subsystem()
    with pytest.raises(AddressOutOfRange):
        nvme.submit(addr[0], Command("read", BlockAddress(*addr)))
    assert nvme.submitted == 0 and nvme.inflight(0) == 0


def test_no_inflight_means_no_completions():
    assert subsystem().completions(0) == []


def test_fixed_max_ties_are_reported_in_tag_order():
    nvme = subsystem("fixed-max")
    t1 = nvme.submit(0, Command.read(0, 1))
    t2 = nvme.submit(0, Command.read(0, 2))
    nvme.sim.run()
    done = nvme.completions(0)
    assert [(c.tag, c.completion_time) for c in done] == [(t1, 8000), (t2, 8000)]
    assert nvme.completions(0) == []


def test_uniform_completion_latencies_lie_in_range():
    nvme = subsystem(seed=3, queue_depth=1000)
    cmds = [Command.read(0, i) for i in range(1000)]
    for cmd in cmds:
        nvme.submit(0, cmd)
    nvme.sim.run()
    done = nvme.completions(0)
    assert len(done) == 1000 and len({c.tag for c in done}) == 1000
    for cmd in cmds:
        assert 5000 <= cmd.completion_time - cmd.submit_time <= 8000
    # completion time matches the logged sample exactly
    samples = dict(nvme.samples)
    assert all(cmd.completion_time - cmd.submit_time == samples[cmd.tag] for cmd in cmds)


def test_sync_read_advances_clock_by_the_sample():
    nvme = subsystem("fixed-max")
    nvme.read_block_sync((0, 0))
    assert nvme.sim.now() == 8000


def test_three_dependent_sync_reads_take_24us():
    nvme = subsystem("fixed-max")
    for lba in range(3):
        nvme.read_block_sync((1, lba))
    assert nvme.sim.now() == 24_000


def test_read_observes_whole_blocks_only():
    nvme = subsystem(seed=1)
    nvme.poke((0, 5), block(1))
    write = Command.write(0, 5, block(2))
    read = Command.read(0, 5)
    nvme.submit(0, write)
    nvme.submit(0, read)
    nvme.sim.run()
    assert read.result in (block(1), block(2))


def test_submit_or_wait_parks_and_conserves_commands():
    nvme = subsystem(queue_depth=2)
    cmds = [Command.read(0, i) for i in range(10)]
    for cmd in cmds:
        nvme.submit_or_wait(cmd)
        assert nvme.inflight(0) <= 2
    nvme.sim.run()
    assert nvme.submitted == nvme.completed == 10
    assert all(c.completion_time >= c.submit_time + 5000 for c in cmds)


def test_access_log_records_source():
    nvme = subsystem()
    nvme.read_block_sync((3, 9), source="slot-9")
    (rec,) = nvme.access_log
    assert (rec.device, rec.lba, rec.kind, rec.source) == (3, 9, "read", "slot-9")


def test_write_must_be_one_block():
    nvme = subsystem()
    with pytest.raises(ValueError):
        nvme.submit(0, Command("write", BlockAddress(0, 0), b"short"))


def test_file_backing_persists(tmp_path):
    prefix = f"file:{tmp_path}/dev"
    sim = Simulator()
    nvme = NvmeSubsystem(sim, DeviceConfig(device_count=2, capacity_blocks=16, backing=prefix))
    nvme.write_block_sync((1, 3), block(9))
    nvme.close()
    again = NvmeSubsystem(Simulator(), DeviceConfig(device_count=2, capacity_blocks=16, backing=prefix))
    assert again.read_block_sync((1, 3)) == block(9)
    assert again.read_block_sync((0, 3)) == ZERO_BLOCK
    again.close()


@pytest.mark.parametrize("kwargs", [{"device_count": 0}, {"capacity_blocks": 0}, {"queue_depth": 0},
                                    {"block_size": 512}, {"backing": "tape"}])
def test_invalid_device_configs(kwargs):
    with pytest.raises(ValueError):
        DeviceConfig(**kwargs)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 31), st.booleans()), max_size=80),
       st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_conservation_and_last_write_wins(ops, seed):
    nvme = subsystem(seed=seed, capacity_blocks=32, queue_depth=4)
    shadow: dict[tuple[int, int], bytes] = {}
    for i, (dev, lba, is_write) in enumerate(ops):
        if is_write:
            data = block(i % 256)
            nvme.write_block_sync((dev, lba), data)
            shadow[(dev, lba)] = data
        else:
            assert nvme.read_block_sync((dev, lba)) == shadow.get((dev, lba), ZERO_BLOCK)
        assert nvme.submitted == nvme.completed + sum(nvme.inflight(d) for d in range(4))


def test_littles_law_for_closed_loop_device_traffic():
    # C outstanding reads over 4 devices, each completion immediately reissued
    nvme = subsystem(seed=11)
    sim = nvme.sim
    concurrency, total = 32, 20_000
    issued = 0

    def reissue(cmd: Command) -> None:
        nonlocal issued
        if issued < total:
            issued += 1
            nvme.submit_or_wait(Command.read(issued % 4, issued, on_complete=reissue))

    for _ in range(concurrency):
        issued += 1
        nvme.submit_or_wait(Command.read(issued % 4, issued, on_complete=reissue))
    sim.run()
    throughput = nvme.completed / (sim.now() * 1e-9)
    predicted = concurrency / 6.5e-6
    assert abs(throughput - predicted) / predicted < 0.10
