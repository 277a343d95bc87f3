"""Virtual-time discrete-event core.

Time is an integer count of nanoseconds.  Every other module advances time
only by posting events here, so a fixed seed plus a fixed request trace
replays bit-identically.
"""

from __future__ import annotations

import heapq
import itertools
import random
import time
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable

NS_PER_US = 1_000

#: Default run cap.  Keeps the u64 clock far away from wrapping.
DEFAULT_TIME_BUDGET_NS = 2**62

DISTRIBUTIONS = ("uniform", "fixed-min", "fixed-max")


class TimeBudgetExceeded(RuntimeError):
    """Raised when an event would fire past the configured run cap."""


def us(value: float) -> int:
    """Convert microseconds to integer nanoseconds."""
    return int(round(value * NS_PER_US))


@dataclass(frozen=True)
class LatencyModel:
    """Network RTT and NVMe service-time parameters, in microseconds."""

    net_rtt: float = 1.0
    nvme_min: float = 5.0
    nvme_max: float = 8.0
    distribution: str = "uniform"

    def __post_init__(self) -> None:
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown latency distribution {self.distribution!r}")
        if min(self.net_rtt, self.nvme_min, self.nvme_max) <= 0:
            raise ValueError("latency durations must be positive")
        if self.nvme_min > self.nvme_max:
            raise ValueError("nvme_min must not exceed nvme_max")

    @cached_property
    def net_rtt_ns(self) -> int:
        return us(self.net_rtt)

    @cached_property
    def nvme_min_ns(self) -> int:
        return us(self.nvme_min)

    @cached_property
    def nvme_max_ns(self) -> int:
        return us(self.nvme_max)

    @cached_property
    def nvme_mean_ns(self) -> float:
        if self.distribution == "fixed-min":
            return float(self.nvme_min_ns)
        if self.distribution == "fixed-max":
            return float(self.nvme_max_ns)
        return (self.nvme_min_ns + self.nvme_max_ns) / 2

    def with_distribution(self, distribution: str) -> LatencyModel:
        return LatencyModel(self.net_rtt, self.nvme_min, self.nvme_max, distribution)


def sample_nvme_latency(model: LatencyModel, rng: random.Random) -> int:
    """Draw one NVMe service time in nanoseconds."""
    if model.distribution == "fixed-max":
        return model.nvme_max_ns
    if model.distribution == "fixed-min":
        return model.nvme_min_ns
    lo, hi = model.nvme_min_ns, model.nvme_max_ns
    return lo + int(rng.random() * (hi - lo + 1))


_heappush = heapq.heappush


class EventQueue:
    """Pending events ordered by (time, sequence number).

    The sequence number is assigned at insertion, so events scheduled for
    the same instant fire in FIFO order.
    """

    __slots__ = ("_heap", "_seq")

    def __init__(self) -> None:
        self._heap: list[tuple[int, int, Callable[..., Any], tuple]] = []
        self._seq = itertools.count()

    def push(self, when: int, callback: Callable[..., Any], args: tuple) -> int:
        seq = next(self._seq)
        heapq.heappush(self._heap, (when, seq, callback, args))
        return seq

    def pop(self) -> tuple[int, int, Callable[..., Any], tuple]:
        return heapq.heappop(self._heap)

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


class Simulator:
    """Single-threaded event loop over virtual time.

    ``mode="realtime"`` sleeps between events so virtual delays map onto wall
    clock time (scaled by ``realtime_scale``); it is only meant for demos.
    """

    def __init__(
        self,
        seed: int = 0,
        *,
        mode: str = "virtual",
        realtime_scale: float = 1.0,
        time_budget_ns: int = DEFAULT_TIME_BUDGET_NS,
        trace: bool = False,
    ) -> None:
        if mode not in ("virtual", "realtime"):
            raise ValueError(f"unknown sim mode {mode!r}")
        self.seed = seed
        self.mode = mode
        self.realtime_scale = realtime_scale
        self.time_budget_ns = time_budget_ns
        self._now = 0
        self._queue = EventQueue()
        self._cancelled: set[int] = set()
        self.dispatched = 0
        self.trace: list[tuple[int, int, str]] | None = [] if trace else None
        self._wall_anchor: tuple[float, int] | None = None

    def now(self) -> int:
        return self._now

    def rng(self, stream: str) -> random.Random:
        """Independent deterministic RNG stream derived from the seed."""
        return random.Random(f"{self.seed}/{stream}")

    def schedule(self, delay: int, callback: Callable[..., Any], *args: Any) -> int:
        when = self._now + delay
        if delay < 0 or when > self.time_budget_ns:
            self._reject(delay, when)
        queue = self._queue
        seq = next(queue._seq)
        _heappush(queue._heap, (when, seq, callback, args))
        return seq

    def _reject(self, delay: int, when: int) -> None:
        if delay < 0:
            raise ValueError("delay must be non-negative")
        raise TimeBudgetExceeded(f"event at {when} ns exceeds budget {self.time_budget_ns} ns")

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    @property
    def pending(self) -> int:
        return len(self._queue) - len(self._cancelled)

    def step(self) -> bool:
        """Dispatch one event; return False when the queue is empty."""
        while self._queue:
            when, seq, callback, args = self._queue.pop()
            if seq in self._cancelled:
                self._cancelled.discard(seq)
                continue
            if self.mode == "realtime":
                self._sleep_until(when)
            self._now = when
            self.dispatched += 1
            if self.trace is not None:
                self.trace.append((when, seq, getattr(callback, "__qualname__", repr(callback))))
            callback(*args)
            return True
        return False

    def run(self, until: int | None = None) -> int:
        """Drain events (optionally only those at or before ``until``)."""
        if self.mode == "realtime" or self.trace is not None or self._cancelled:
            return self._run_slow(until)
        heap = self._queue._heap
        pop = heapq.heappop
        limit = until if until is not None else self.time_budget_ns
        count = 0
        try:
            while heap:
                if heap[0][0] > limit:
                    break
                when, _seq, callback, args = pop(heap)
                self._now = when
                count += 1
                callback(*args)
                if self._cancelled:
                    self.dispatched += count
                    count = 0
                    return self._run_slow(until)
        finally:
            self.dispatched += count
        if until is not None:
            self._now = max(self._now, until)
        return self._now

    def _run_slow(self, until: int | None) -> int:
        queue = self._queue
        while queue:
            if until is not None and queue.peek_time() > until:
                break
            self.step()
        if until is not None:
            self._now = max(self._now, until)
        return self._now

    def run_until(self, predicate: Callable[[], bool]) -> int:
        while not predicate():
            if not self.step():
                raise RuntimeError("event queue drained before condition became true")
        return self._now

    def _sleep_until(self, when: int) -> None:
        if self._wall_anchor is None:
            self._wall_anchor = (time.monotonic(), self._now)
        wall0, virt0 = self._wall_anchor
        target = wall0 + (when - virt0) * 1e-9 * self.realtime_scale
        delay = target - time.monotonic()
        if delay > 0:
            time.sleep(delay)
