from __future__ import annotations

import random
import statistics

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperion.simclock import (
    LatencyModel, Simulator, TimeBudgetExceeded, sample_nvme_latency, us,
)


def test_fresh_clock_reads_zero_and_is_stable():
    sim = Simulator()
    assert sim.now() == 0
    assert sim.now() == sim.now()


def test_one_microsecond_event_advances_clock():
    sim = Simulator()
    sim.schedule(us(1), lambda: None)
    sim.run()
    assert sim.now() == 1000


def test_zero_delay_fires_before_later_scheduled_event_at_same_time():
    sim = Simulator()
    order = []
    sim.schedule(0, order.append, "first")
    sim.schedule(0, order.append, "second")
    sim.run()
    assert order == ["first", "second"]


def test_time_order_beats_insertion_order():
    sim = Simulator()
    order = []
    sim.schedule(us(5), order.append, "a")
    sim.schedule(us(3), order.append, "b")
    sim.run()
    assert order == ["b", "a"]


def test_event_ids_are_unique():
    sim = Simulator()
    ids = {sim.schedule(i % 3, lambda: None) for i in range(100)}
    assert len(ids) == 100


def _random_trace(seed: int, count: int = 10_000) -> list[tuple[int, int]]:
    sim = Simulator(seed)
    rng = sim.rng("workload")
    fired: list[tuple[int, int]] = []

    def handler(tag: int) -> None:
        fired.append((sim.now(), tag))
        if rng.random() < 0.3:
            sim.schedule(rng.randrange(0, 50), handler, tag + 1_000_000)

    for tag in range(count):
        sim.schedule(rng.randrange(0, 10_000), handler, tag)
    sim.run()
    return fired


def test_replay_with_same_seed_is_identical():
    first = _random_trace(42)
    assert len(first) >= 10_000
    assert first == _random_trace(42)
    assert first != _random_trace(43)


def test_trace_mode_records_dispatch_order():
    sim = Simulator(trace=True)
    sim.schedule(10, lambda: None)
    sim.schedule(5, lambda: None)
    sim.run()
    assert [t for t, _, _ in sim.trace] == [5, 10]


def test_negative_delay_is_rejected():
    with pytest.raises(ValueError):
        Simulator().schedule(-1, lambda: None)


def test_time_budget_is_enforced():
    sim = Simulator(time_budget_ns=1000)
    sim.schedule(1000, lambda: None)
    with pytest.raises(TimeBudgetExceeded):
        sim.schedule(1001, lambda: None)


def test_cancelled_event_does_not_fire():
    sim = Simulator()
    fired = []
    eid = sim.schedule(5, fired.append, 1)
    sim.schedule(6, fired.append, 2)
    sim.cancel(eid)
    sim.run()
    assert fired == [2]


def test_run_until_stops_at_bound():
    sim = Simulator()
    fired = []
    sim.schedule(5, fired.append, 5)
    sim.schedule(50, fired.append, 50)
    sim.run(until=10)
    assert fired == [5] and sim.now() == 10
    sim.run()
    assert fired == [5, 50]


def test_realtime_mode_dispatches_in_order():
    sim = Simulator(mode="realtime", realtime_scale=0.001)
    order = []
    sim.schedule(us(20), order.append, 2)
    sim.schedule(us(10), order.append, 1)
    sim.run()
    assert order == [1, 2] and sim.now() == us(20)


@given(st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 1000)), min_size=1, max_size=60))
@settings(max_examples=100, deadline=None)
def test_no_event_runs_before_its_scheduler(pairs):
    sim = Simulator()
    violations = []

    def child(parent_time: int) -> None:
        if sim.now() < parent_time:
            violations.append((parent_time, sim.now()))

    def parent(delay: int) -> None:
        sim.schedule(delay, child, sim.now())

    for first, second in pairs:
        sim.schedule(first, parent, second)
    seen = []
    while sim.step():
        seen.append(sim.now())
    assert not violations
    assert seen == sorted(seen)


# -- latency model -------------------------------------------------------------


def test_fixed_models_return_the_bounds():
    rng = random.Random(0)
    assert sample_nvme_latency(LatencyModel(distribution="fixed-max"), rng) == 8000
    assert sample_nvme_latency(LatencyModel(distribution="fixed-min"), rng) == 5000


def test_uniform_mean_matches_expectation():
    rng = random.Random(7)
    model = LatencyModel()
    samples = [sample_nvme_latency(model, rng) for _ in range(1_000_000)]
    mean = statistics.fmean(samples)
    assert abs(mean - 6500) / 6500 < 0.01
    assert min(samples) >= 5000 and max(samples) <= 8000


@given(st.floats(0.1, 50), st.floats(0, 50), st.integers(0, 2**32))
@settings(max_examples=200, deadline=None)
def test_uniform_samples_stay_in_range(lo, width, seed):
    model = LatencyModel(nvme_min=lo, nvme_max=lo + width)
    rng = random.Random(seed)
    for _ in range(20):
        v = sample_nvme_latency(model, rng)
        assert model.nvme_min_ns <= v <= model.nvme_max_ns


@pytest.mark.parametrize("kwargs", [
    {"nvme_min": 9.0, "nvme_max": 8.0},
    {"net_rtt": 0},
    {"nvme_min": -1.0},
    {"distribution": "normal"},
])
def test_invalid_latency_models_are_rejected(kwargs):
    with pytest.raises(ValueError):
        LatencyModel(**kwargs)
