"""Event queue and message transport for the discrete-event simulation."""

from __future__ import annotations

import enum
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .scenario import NetworkParams


class EventKind(enum.Enum):
    MessageDelivery = "message_delivery"
    NodeTimer = "node_timer"
    VehicleStep = "vehicle_step"
    Fault = "fault"
    Broadcast = "broadcast"


@dataclass(order=True)
class SimEvent:
    fire_time: float
    sequence: int
    kind: EventKind = field(compare=False)
    target: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class EventQueue:
    """Pops in (fire_time, sequence) order; sequence numbers are never reused."""

    def __init__(self):
        self._heap: list[SimEvent] = []
        self._seq = itertools.count()

    def push(self, fire_time: float, kind: EventKind, target: str, payload: Any = None) -> SimEvent:
        ev = SimEvent(fire_time, next(self._seq), kind, target, payload)
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)

    def peek_time(self) -> Optional[float]:
        return self._heap[0].fire_time if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


@dataclass(frozen=True)
class Message:
    src: str
    kind: str
    body: Any
    epoch: int = 0      # receiver's crash epoch at send time


class Network:
    """Per-link latency ``base + U(0, jitter)`` and Bernoulli loss, from one seeded stream."""

    def __init__(self, params: NetworkParams, rng: np.random.Generator):
        self.params = params
        self.rng = rng
        self._links = {}
        for link in params.links:
            self._links[(link.a, link.b)] = link
            self._links[(link.b, link.a)] = link
        self.sent = 0
        self.dropped = 0

    def sample(self, src: str, dst: str) -> Optional[float]:
        """Latency for one message, or None when it is lost."""
        link = self._links.get((src, dst))
        base, jitter, drop = ((link.latency, link.jitter, link.drop_prob) if link else
                              (self.params.latency, self.params.jitter, self.params.drop_prob))
        self.sent += 1
        u_drop, u_lat = self.rng.random(2)
        if u_drop < drop:
            self.dropped += 1
            return None
        return base + jitter * float(u_lat)
