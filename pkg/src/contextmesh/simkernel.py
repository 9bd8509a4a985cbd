"""Deterministic discrete-event simulation kernel.

Everything in a simulation shares one virtual clock in integer milliseconds and
one event queue. Actions scheduled for the same instant run in FIFO order, all
randomness flows through a single seeded generator, and every observable effect
is appended to one trace, so a (scenario, seed) pair always produces the same
trace bytes.

Node-to-node latency is a fixed function of the two node profiles: 1 ms to
self, 5 ms within a region, and 40 ms plus 10 ms per region hop across regions,
with regions arranged on a ring in lexicographic order.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable

MS = int

LOCAL_LATENCY_MS = 1
INTRA_REGION_LATENCY_MS = 5
INTER_REGION_BASE_MS = 40
INTER_REGION_PER_HOP_MS = 10


class SimError(Exception):
    """Base class for kernel-level usage errors."""


class UnknownNodeError(SimError):
    pass


class DeadNodeError(SimError):
    pass


class SchedulingError(SimError):
    pass


@dataclass
class NodeProfile:
    """Static description of a simulated node.

    `node_id` is the node's 32-hex-digit overlay identifier; the kernel treats
    it as opaque. `name` is the scenario-level handle used in traces.
    """

    name: str
    node_id: str
    region: str
    lat: float = 0.0
    lon: float = 0.0
    storage_slots: int = 64
    compute_slots: int = 16
    alive: bool = True


@dataclass
class SimMessage:
    src: str
    dst: str
    payload: Any
    send_time: MS
    deliver_time: MS


@dataclass
class TraceRecord:
    t: MS
    kind: str
    node: str
    detail: dict

    def to_json(self) -> str:
        # Key order t, kind, node, detail is part of the trace format.
        return json.dumps(
            {"t": self.t, "kind": self.kind, "node": self.node, "detail": self.detail},
            separators=(",", ":"),
        )


def trace_to_jsonl(records: list[TraceRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def _canonical(value: Any) -> Any:
    """Normalize a trace detail value so serialization is order-independent."""
    if isinstance(value, dict):
        return {str(k): _canonical(value[k]) for k in sorted(value, key=str)}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if value is None or isinstance(value, (bool, int, float, str)):
        return value
    raise TypeError(f"trace detail value not serializable: {value!r}")


class ActionHandle:
    """Returned by schedule(); lets the caller cancel a pending action."""

    __slots__ = ("when", "seq", "cancelled")

    def __init__(self, when: MS, seq: int):
        self.when = when
        self.seq = seq
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass
class MessageCounters:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0


class Simulation:
    """Virtual clock, action queue, node registry, and message plane."""

    def __init__(self, seed: int = 0):
        self.now: MS = 0
        self.rng = random.Random(seed)
        self.seed = seed
        self.nodes: dict[str, NodeProfile] = {}
        self.counters = MessageCounters()
        self.records: list[TraceRecord] = []
        self._queue: list[tuple[MS, int, ActionHandle, Callable[[], None]]] = []
        self._seq = 0
        self._handlers: dict[str, dict[type, Callable[[str, Any], None]]] = {}
        self._withdrawal_hooks: dict[str, list[Callable[[], None]]] = {}
        self._membership_hooks: list[Callable[[str, str], None]] = []
        self._pending_kill: set[str] = set()
        self._regions: list[str] = []
        self._event_ids = 0

    # -- node registry -------------------------------------------------

    def add_node(self, profile: NodeProfile) -> None:
        if profile.name in self.nodes:
            raise SimError(f"duplicate node {profile.name!r}")
        self.nodes[profile.name] = profile
        self._handlers[profile.name] = {}
        self._withdrawal_hooks[profile.name] = []
        if profile.region not in self._regions:
            self._regions = sorted(self._regions + [profile.region])
        self._notify_membership("join", profile.name)

    def node(self, name: str) -> NodeProfile:
        try:
            return self.nodes[name]
        except KeyError:
            raise UnknownNodeError(name) from None

    def alive(self, name: str) -> bool:
        return name in self.nodes and self.nodes[name].alive

    def live_nodes(self) -> list[str]:
        return [n for n, p in self.nodes.items() if p.alive]

    def on_membership_change(self, hook: Callable[[str, str], None]) -> None:
        """Register hook(change_kind, node_name); kinds: join, crash, leave."""
        self._membership_hooks.append(hook)

    def on_withdrawal(self, name: str, hook: Callable[[], None]) -> None:
        self._withdrawal_hooks[self.node(name).name].append(hook)

    def _notify_membership(self, kind: str, name: str) -> None:
        for hook in self._membership_hooks:
            hook(kind, name)

    # -- latency model ---------------------------------------------------

    def latency(self, src: str, dst: str) -> MS:
        a, b = self.node(src), self.node(dst)
        if src == dst:
            return LOCAL_LATENCY_MS
        if a.region == b.region:
            return INTRA_REGION_LATENCY_MS
        ia = self._regions.index(a.region)
        ib = self._regions.index(b.region)
        span = abs(ia - ib)
        hops = min(span, len(self._regions) - span)
        return INTER_REGION_BASE_MS + INTER_REGION_PER_HOP_MS * hops

    # -- scheduling ------------------------------------------------------

    def schedule(self, at: MS, action: Callable[[], None]) -> ActionHandle:
        if at < self.now:
            raise SchedulingError(f"cannot schedule at {at} (now={self.now})")
        handle = ActionHandle(at, self._seq)
        heapq.heappush(self._queue, (at, self._seq, handle, action))
        self._seq += 1
        return handle

    def after(self, delay: MS, action: Callable[[], None]) -> ActionHandle:
        return self.schedule(self.now + delay, action)

    def every(
        self,
        period: MS,
        action: Callable[[], None],
        node: str | None = None,
        first_at: MS | None = None,
    ) -> ActionHandle:
        """Schedule a repeating action.

        If `node` is given the cycle stops silently once that node is dead.
        The returned handle cancels only the next pending firing; keeping the
        cycle going re-arms through fresh handles held in the closure.
        """
        if period <= 0:
            raise SchedulingError("period must be positive")
        state: dict[str, ActionHandle] = {}

        def fire() -> None:
            if node is not None and not self.alive(node):
                return
            action()
            state["h"] = self.schedule(self.now + period, fire)

        start = self.now + period if first_at is None else first_at
        state["h"] = self.schedule(start, fire)
        return state["h"]

    def run_until(self, t: MS) -> list[TraceRecord]:
        """Execute all actions with time <= t, then set the clock to t.

        Returns the full append-only trace for convenience.
        """
        if t < self.now:
            raise SchedulingError(f"run_until({t}) is in the past (now={self.now})")
        while self._queue and self._queue[0][0] <= t:
            when, _, handle, action = heapq.heappop(self._queue)
            if handle.cancelled:
                continue
            self.now = when
            action()
        self.now = t
        return self.records

    # -- messaging -------------------------------------------------------

    def register_handler(
        self, name: str, payload_type: type, fn: Callable[[str, Any], None]
    ) -> None:
        """Install fn(src, payload) for messages of payload_type at a node."""
        self._handlers[self.node(name).name][payload_type] = fn

    def send(self, src: str, dst: str, payload: Any) -> SimMessage:
        if not self.alive(src):
            raise DeadNodeError(f"send from dead node {src!r}")
        self.node(dst)
        deliver = self.now + self.latency(src, dst)
        msg = SimMessage(src, dst, payload, self.now, deliver)
        self.counters.sent += 1
        self.schedule(deliver, lambda: self._deliver(msg))
        return msg

    def _deliver(self, msg: SimMessage) -> None:
        if not self.alive(msg.dst):
            self.counters.dropped += 1
            self.trace(
                "net.drop",
                msg.dst,
                {"from": msg.src, "payload": type(msg.payload).__name__},
            )
            return
        handler = self._handlers[msg.dst].get(type(msg.payload))
        if handler is None:
            raise SimError(
                f"no handler for {type(msg.payload).__name__} at {msg.dst!r}"
            )
        self.counters.delivered += 1
        handler(msg.src, msg.payload)

    # -- lifecycle -------------------------------------------------------

    def crash(self, name: str, at: MS | None = None) -> None:
        """Kill a node without warning. Messages in flight to it are dropped."""
        self._schedule_kill(name, at, graceful=False)

    def leave(self, name: str, at: MS | None = None) -> None:
        """Graceful departure: withdrawal hooks run, then the node dies."""
        self._schedule_kill(name, at, graceful=True)

    def _schedule_kill(self, name: str, at: MS | None, graceful: bool) -> None:
        profile = self.node(name)
        if not profile.alive:
            raise DeadNodeError(f"{name!r} is already dead")
        if name in self._pending_kill:
            raise DeadNodeError(f"{name!r} already has a pending kill")
        if at is None:
            self._kill(name, graceful)
            return
        if at < self.now:
            raise SchedulingError(f"cannot schedule kill at {at} (now={self.now})")
        self._pending_kill.add(name)
        self.schedule(at, lambda: self._kill(name, graceful))

    def _kill(self, name: str, graceful: bool) -> None:
        self._pending_kill.discard(name)
        profile = self.node(name)
        if not profile.alive:
            return
        kind = "leave" if graceful else "crash"
        if graceful:
            for hook in self._withdrawal_hooks[name]:
                hook()
        profile.alive = False
        self.trace(f"node.{kind}", name, {})
        self._notify_membership(kind, name)

    # -- trace and ids ---------------------------------------------------

    def trace(self, kind: str, node: str, detail: dict) -> TraceRecord:
        record = TraceRecord(self.now, kind, node, _canonical(detail))
        self.records.append(record)
        return record

    def next_event_id(self) -> int:
        self._event_ids += 1
        return self._event_ids
