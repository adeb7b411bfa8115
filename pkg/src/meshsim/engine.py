"""Deterministic discrete-event kernel with a virtual microsecond clock.

Every protocol module runs inside this kernel: code observes time only
through Engine.now and makes progress only via scheduled callbacks.
Randomness comes from RandomSource streams derived deterministically from
one master seed, so a run is fully reproducible from (config, seed).
"""

import heapq
import random
from statistics import NormalDist

from .errors import ConfigError

_MASK64 = (1 << 64) - 1
_STD_NORMAL = NormalDist()


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer; stable across platforms."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _label_hash(label: str) -> int:
    # FNV-1a, 64 bit.  Does not depend on PYTHONHASHSEED.
    h = 0xCBF29CE484222325
    for b in label.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


class RandomSource:
    """Seeded random stream with deterministic child-stream derivation.

    Streams derived with different labels are independent: drawing from one
    never perturbs another.  draw_uniform and draw_normal consume exactly
    one generator step each.
    """

    __slots__ = ("seed", "_rng")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._rng = random.Random(self.seed)

    def stream(self, label: str) -> "RandomSource":
        """Derive an independent child stream; same (seed, label) -> same stream."""
        return RandomSource(_splitmix64(self.seed ^ _label_hash(label)))

    def draw_uniform(self, lo: float, hi: float) -> float:
        if lo > hi:
            raise ConfigError(f"uniform draw with lo={lo} > hi={hi}")
        return lo + (hi - lo) * self._rng.random()

    def draw_normal(self, mean: float, stddev: float) -> float:
        if stddev < 0:
            raise ConfigError(f"normal draw with negative stddev {stddev}")
        u = self._rng.random()
        if stddev == 0.0:
            return mean
        if u <= 0.0:
            u = 5e-324
        return mean + stddev * _STD_NORMAL.inv_cdf(u)

    def sample(self, population, k: int) -> list:
        return self._rng.sample(population, k)

    def randrange(self, n: int) -> int:
        return self._rng.randrange(n)


class Engine:
    """Single-threaded event loop ordered by (fire_at, insertion counter).

    Events that share a fire time dispatch in insertion order, which keeps
    replays byte-identical.  A handle returned by schedule() can be passed
    to cancel(); cancelled events are skipped and not counted.
    """

    __slots__ = ("_heap", "_counter", "_now", "dispatched")

    def __init__(self):
        self._heap: list[list] = []
        self._counter = 0
        self._now = 0
        self.dispatched = 0

    @property
    def now(self) -> int:
        return self._now

    def schedule(self, fire_at: int, action, *args) -> list:
        """Queue action(*args) at fire_at (µs); returns a cancellable handle."""
        if fire_at < self._now:
            raise ConfigError(
                f"cannot schedule event at t={fire_at} µs: clock already at {self._now} µs"
            )
        entry = [fire_at, self._counter, action, args]
        self._counter += 1
        heapq.heappush(self._heap, entry)
        return entry

    def schedule_after(self, delay: int, action, *args) -> list:
        return self.schedule(self._now + delay, action, *args)

    @staticmethod
    def cancel(handle: list) -> None:
        """Mark a scheduled event as cancelled; it will be skipped on dispatch."""
        handle[2] = None

    def run(self, until: int) -> int:
        """Dispatch every pending event due at or before `until`.

        Events scheduled during dispatch also run if due.  Leaves the clock
        at `until` even when the queue empties early.  Returns the number of
        events dispatched.
        """
        if until < self._now:
            raise ConfigError(f"cannot run to t={until} µs: clock already at {self._now} µs")
        count = 0
        heap = self._heap
        pop = heapq.heappop
        while heap and heap[0][0] <= until:
            fire_at, _, action, args = pop(heap)
            if action is None:
                continue
            self._now = fire_at
            action(*args)
            count += 1
        self._now = until
        self.dispatched += count
        return count

    def run_until_idle(self, max_events: int | None = None) -> int:
        """Dispatch until the queue drains; the clock stops at the last event."""
        count = 0
        heap = self._heap
        pop = heapq.heappop
        while heap:
            fire_at, _, action, args = pop(heap)
            if action is None:
                continue
            self._now = fire_at
            action(*args)
            count += 1
            if max_events is not None and count >= max_events:
                break
        self.dispatched += count
        return count
