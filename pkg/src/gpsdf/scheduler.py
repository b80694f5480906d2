"""Three-queue deferral of marching, GP buffer updates and GP training.

Marching is ordered by the oldest request time. Buffer updates and
training are ordered by pending marks, boosted by how often the partition
is queried. The scheduler only does bookkeeping; the work itself is done by
callbacks supplied by the map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .spatial import OctantKey

log = logging.getLogger(__name__)

C0_CAP = 10000

MARCH, BUFFER, TRAIN = "march", "buffer", "train"


def score_buffer(c1: float, c0: int, eta1: float) -> float:
    return c1 * (1.0 + eta1 * c0)


def score_training(c2: float, c0: int, eta2: float) -> float:
    return c2 * (1.0 + eta2 * c0)


def init_c1(gp_center, sensor_origin, c1_max: float, gamma_decay: float) -> float:
    if not (c1_max > 0 and gamma_decay > 0):
        raise ValueError("c1_max and gamma_decay must be positive")
    dist = float(np.linalg.norm(np.asarray(gp_center, float) - np.asarray(sensor_origin, float)))
    return c1_max * math.exp(-gamma_decay * dist)


@dataclass
class SchedulerParams:
    eta1: float = 0.01
    eta2: float = 0.01
    c1_max: float = 8.0
    gamma_decay: float = 0.5
    budgets: tuple = (8, 8, 4)


@dataclass
class PartitionCounters:
    c0: int = 0
    c1: float = 0.0
    c2: float = 0.0
    t_b: float | None = None
    seq: int = 0

    def on_query(self) -> "PartitionCounters":
        self.c0 = min(self.c0 + 1, C0_CAP)
        return self


@dataclass(frozen=True)
class Task:
    kind: str
    key: OctantKey


@dataclass
class Scheduler:
    """Queues keyed by partition.

    ``on_march(key)`` returns the GP keys whose buffers must be refreshed;
    ``on_buffer(key)`` and ``on_train(key)`` do the work. Any callback may
    be omitted for pure bookkeeping simulations; without ``on_march`` a
    march marks only the partition's own buffer.
    """

    params: SchedulerParams = field(default_factory=SchedulerParams)
    on_march: Callable[[OctantKey], Iterable[OctantKey]] | None = None
    on_buffer: Callable[[OctantKey], None] | None = None
    on_train: Callable[[OctantKey], None] | None = None
    counters: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    _seq: int = 0

    def counter(self, key: OctantKey) -> PartitionCounters:
        c = self.counters.get(key)
        if c is None:
            c = self.counters[key] = PartitionCounters()
        return c

    def add_partition(self, key: OctantKey, gp_center, sensor_origin) -> PartitionCounters:
        c = self.counter(key)
        c.c1 += init_c1(gp_center, sensor_origin, self.params.c1_max, self.params.gamma_decay)
        return c

    # --- marks
    def request_march(self, key: OctantKey, t: float) -> None:
        c = self.counter(key)
        self._seq += 1
        c.t_b, c.seq = float(t), self._seq

    def mark_buffer(self, key: OctantKey, amount: float = 1.0) -> None:
        self.counter(key).c1 += amount

    def on_query(self, key: OctantKey) -> PartitionCounters:
        return self.counter(key).on_query()

    # --- queue views
    def march_queue(self) -> list[OctantKey]:
        pend = [(c.t_b, c.seq, k) for k, c in self.counters.items() if c.t_b is not None]
        return [k for _, _, k in sorted(pend)]

    def buffer_queue(self) -> list[OctantKey]:
        p = self.params
        pend = [(-score_buffer(c.c1, c.c0, p.eta1), k) for k, c in self.counters.items() if c.c1 > 0]
        return [k for _, k in sorted(pend)]

    def train_queue(self) -> list[OctantKey]:
        p = self.params
        pend = [(-score_training(c.c2, c.c0, p.eta2), k) for k, c in self.counters.items() if c.c2 > 0]
        return [k for _, k in sorted(pend)]

    def depths(self) -> tuple[int, int, int]:
        return len(self.march_queue()), len(self.buffer_queue()), len(self.train_queue())

    # --- execution
    def run_march(self, key: OctantKey) -> Task:
        c = self.counter(key)
        c.t_b = None
        targets = self.on_march(key) if self.on_march else (key,)
        for k in targets or ():
            self.mark_buffer(k)
        return self._done(MARCH, key)

    def run_buffer(self, key: OctantKey) -> Task:
        c = self.counter(key)
        if self.on_buffer:
            self.on_buffer(key)
        c.c2 += c.c1
        c.c1 = 0.0
        return self._done(BUFFER, key)

    def run_train(self, key: OctantKey) -> Task:
        c = self.counter(key)
        if self.on_train:
            self.on_train(key)
        c.c2 = 0.0
        c.c0 //= 2
        return self._done(TRAIN, key)

    def _done(self, kind: str, key: OctantKey) -> Task:
        t = Task(kind, key)
        self.history.append(t)
        return t

    def step(self, budgets=None, exempt: Iterable[OctantKey] = ()) -> list[Task]:
        """Run up to the budgeted number of tasks from each queue in order.

        Partitions in ``exempt`` with a pending march are marched first and
        do not count against the marching budget.
        """
        n_march, n_buffer, n_train = self.params.budgets if budgets is None else budgets
        if min(n_march, n_buffer, n_train) < 0:
            raise ValueError("budgets must be >= 0")
        done = []
        for k in sorted(set(exempt)):
            if self.counter(k).t_b is not None:
                done.append(self.run_march(k))
        for k in self.march_queue()[:n_march]:
            done.append(self.run_march(k))
        for k in self.buffer_queue()[:n_buffer]:
            done.append(self.run_buffer(k))
        for k in self.train_queue()[:n_train]:
            done.append(self.run_train(k))
        depth = self.depths()
        log.debug("scheduler step tasks=%d march=%d buffer=%d train=%d queued=%s",
                  len(done), sum(t.kind == MARCH for t in done), sum(t.kind == BUFFER for t in done),
                  sum(t.kind == TRAIN for t in done), depth)
        return done

    def force_ready(self, key: OctantKey, needs_training: bool) -> list[Task]:
        """Bring one partition's GP up to date synchronously (buffer, then train)."""
        done = []
        c = self.counter(key)
        if c.c1 > 0 or needs_training:
            done.append(self.run_buffer(key))
        if c.c2 > 0 or needs_training:
            done.append(self.run_train(key))
        return done
