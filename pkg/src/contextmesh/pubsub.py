"""Content-based publish/subscribe over a broker tree.

Events are typed attribute sets. Subscriptions name an event type (exact or
the ``*`` wildcard) plus attribute constraints; a subscription matches an
event only if every constraint holds, and a constraint on a missing attribute
fails (``exists`` is the presence test). Every node acts as a broker; brokers
form a minimum-spanning tree over pairwise latency and forward subscriptions
and events along it, so a sink sees a matching event exactly once, delayed by
the tree path latency.

Subscription forwarding can be suppressed when an already-forwarded
subscription covers the new one. ``covers`` is deliberately conservative: it
may miss containments but never reports one that does not hold, which keeps
suppression invisible in delivered event sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

from .simkernel import MS, DeadNodeError, Simulation

OPERATORS = (
    "eq",
    "ne",
    "lt",
    "le",
    "gt",
    "ge",
    "prefix",
    "suffix",
    "substring",
    "exists",
)

_ORDERED = {"lt", "le", "gt", "ge"}
_STRING = {"prefix", "suffix", "substring"}

WILDCARD = "*"


class PubSubError(Exception):
    pass


@dataclass(frozen=True)
class Geo:
    """A WGS84 coordinate pair."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise PubSubError(f"coordinate out of range: {self.lat}, {self.lon}")


AttrValue = int | float | str | bool | Geo


def is_numeric(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def values_equal(a: AttrValue, b: AttrValue) -> bool:
    """Typed equality: values of different kinds are never equal."""
    if isinstance(a, Geo) or isinstance(b, Geo):
        return isinstance(a, Geo) and isinstance(b, Geo) and a == b
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if is_numeric(a) and is_numeric(b):
        return a == b
    if isinstance(a, str) and isinstance(b, str):
        return a == b
    return False


def check_attr_value(value: Any) -> AttrValue:
    if isinstance(value, (bool, int, float, str, Geo)):
        return value
    raise PubSubError(f"unsupported attribute value: {value!r}")


@dataclass
class Event:
    """A typed, timestamped attribute set."""

    type_name: str
    attributes: dict[str, AttrValue]
    timestamp: MS
    source: str
    event_id: int

    def __post_init__(self):
        for name, value in self.attributes.items():
            if not isinstance(name, str) or not name:
                raise PubSubError(f"bad attribute name {name!r}")
            check_attr_value(value)


@dataclass(frozen=True)
class Constraint:
    name: str
    op: str
    value: AttrValue | None = None

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise PubSubError(f"unknown operator {self.op!r}")
        if self.op == "exists":
            if self.value is not None:
                raise PubSubError("exists takes no constant")
        elif self.op in _ORDERED:
            if not is_numeric(self.value):
                raise PubSubError(f"{self.op} needs a numeric constant")
        elif self.op in _STRING:
            if not isinstance(self.value, str):
                raise PubSubError(f"{self.op} needs a string constant")
        else:
            check_attr_value(self.value)


@dataclass(frozen=True)
class Subscription:
    type_pattern: str
    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self):
        if not self.type_pattern:
            raise PubSubError("empty type pattern")


def apply_op(op: str, value: AttrValue, constant: AttrValue | None) -> bool:
    """Evaluate one operator against a present attribute value."""
    if op == "exists":
        return True
    if op == "eq":
        return values_equal(value, constant)
    if op == "ne":
        return not values_equal(value, constant)
    if op in _ORDERED:
        if not is_numeric(value):
            return False
        if op == "lt":
            return value < constant
        if op == "le":
            return value <= constant
        if op == "gt":
            return value > constant
        return value >= constant
    if not isinstance(value, str):
        return False
    if op == "prefix":
        return value.startswith(constant)
    if op == "suffix":
        return value.endswith(constant)
    return constant in value


def match(sub: Subscription, event: Event) -> bool:
    if sub.type_pattern != WILDCARD and sub.type_pattern != event.type_name:
        return False
    for c in sub.constraints:
        if c.name not in event.attributes:
            return False
        if not apply_op(c.op, event.attributes[c.name], c.value):
            return False
    return True


def _implies(c2: Constraint, c1: Constraint) -> bool:
    """True if every attribute value satisfying c2 also satisfies c1.

    Both constraints are on the same attribute. Conservative: unknown pairs
    return False.
    """
    if c1.op == "exists":
        return True
    if c1.op == "eq":
        return c2.op == "eq" and values_equal(c2.value, c1.value)
    if c1.op == "ne":
        if c2.op == "ne":
            return values_equal(c2.value, c1.value)
        if c2.op == "eq":
            return not values_equal(c2.value, c1.value)
        if is_numeric(c1.value) and c2.op in _ORDERED:
            v = c1.value
            if c2.op == "lt":
                return c2.value <= v
            if c2.op == "le":
                return c2.value < v
            if c2.op == "gt":
                return c2.value >= v
            return c2.value > v
        return False
    if c1.op in _ORDERED:
        a = c1.value
        if c2.op == "eq":
            return is_numeric(c2.value) and apply_op(c1.op, c2.value, a)
        if c2.op not in _ORDERED:
            return False
        b = c2.value
        if c1.op == "lt":
            return (c2.op == "lt" and b <= a) or (c2.op == "le" and b < a)
        if c1.op == "le":
            return (c2.op in ("lt", "le")) and b <= a
        if c1.op == "gt":
            return (c2.op == "gt" and b >= a) or (c2.op == "ge" and b > a)
        return (c2.op in ("gt", "ge")) and b >= a
    # string operators
    p = c1.value
    if c2.op == "eq":
        return isinstance(c2.value, str) and apply_op(c1.op, c2.value, p)
    if c1.op == "prefix":
        return c2.op == "prefix" and c2.value.startswith(p)
    if c1.op == "suffix":
        return c2.op == "suffix" and c2.value.endswith(p)
    if c1.op == "substring":
        return c2.op in _STRING and p in c2.value
    return False


def covers(s1: Subscription, s2: Subscription) -> bool:
    """True only if every event matching s2 also matches s1."""
    if s1.type_pattern != WILDCARD:
        if s2.type_pattern == WILDCARD or s1.type_pattern != s2.type_pattern:
            return False
    for c1 in s1.constraints:
        if not any(
            c2.name == c1.name and _implies(c2, c1) for c2 in s2.constraints
        ):
            return False
    return True


# -- broker network ------------------------------------------------------


@dataclass
class _SubForward:
    sub: Subscription


@dataclass
class _EventForward:
    event: Event
    published_at: MS


@dataclass
class _LocalSub:
    handle: int
    node: str
    sub: Subscription
    sink: str
    callback: Callable[[Event], None]


class EventFabric:
    """The broker overlay: one broker per live node, joined into an MST."""

    def __init__(self, sim: Simulation, covering_enabled: bool = True):
        self.sim = sim
        self.covering_enabled = covering_enabled
        self._local: dict[str, list[_LocalSub]] = {}
        self._interests: dict[str, dict[str, list[Subscription]]] = {}
        self._forwarded: dict[str, dict[str, list[Subscription]]] = {}
        self._adj: dict[str, list[str]] = {}
        self._by_handle: dict[int, _LocalSub] = {}
        self._next_handle = 1
        for name in sim.nodes:
            self._attach(name)
        self._rebuild_tree()
        sim.on_membership_change(self._on_membership)

    def _attach(self, name: str) -> None:
        self._local.setdefault(name, [])
        self.sim.register_handler(
            name, _SubForward, lambda src, p, me=name: self._recv_sub(me, src, p)
        )
        self.sim.register_handler(
            name, _EventForward, lambda src, p, me=name: self._recv_event(me, src, p)
        )

    def _on_membership(self, kind: str, name: str) -> None:
        if kind == "join":
            self._attach(name)
        self._rebuild_tree()

    # -- tree maintenance ------------------------------------------------

    def tree_edges(self) -> list[tuple[str, str]]:
        seen = set()
        out = []
        for a in sorted(self._adj):
            for b in self._adj[a]:
                if (b, a) not in seen:
                    seen.add((a, b))
                    out.append((a, b))
        return out

    def _rebuild_tree(self) -> None:
        live = sorted(self.sim.live_nodes())
        edges = sorted(
            (self.sim.latency(a, b), a, b)
            for i, a in enumerate(live)
            for b in live[i + 1 :]
        )
        parent = {n: n for n in live}

        def find(x: str) -> str:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        adj: dict[str, list[str]] = {n: [] for n in live}
        for _, a, b in edges:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb
                adj[a].append(b)
                adj[b].append(a)
        self._adj = {n: sorted(adj[n]) for n in live}
        self._interests = {n: {p: [] for p in self._adj[n]} for n in live}
        self._forwarded = {n: {p: [] for p in self._adj[n]} for n in live}
        # The rebuild is atomic: lanes are reconstituted in the same step as
        # the tree, so an event already in flight routes correctly on arrival
        # instead of racing a re-advertisement round and being dropped at a
        # broker whose lanes have not converged yet.
        for name in sorted(self._local):
            if self.sim.alive(name):
                for ls in self._local[name]:
                    self._spread(name, ls.sub)

    def _spread(self, origin: str, sub: Subscription) -> None:
        """Record ``sub`` in every lane its advertisement flood would reach."""
        came_from: dict[str, str | None] = {origin: None}
        frontier = [origin]
        while frontier:
            node = frontier.pop(0)
            for peer in self._adj.get(node, []):
                if peer == came_from[node]:
                    continue
                lane = self._forwarded[node][peer]
                if self.covering_enabled and any(covers(prev, sub) for prev in lane):
                    continue
                lane.append(sub)
                self._interests[peer][node].append(sub)
                came_from[peer] = node
                frontier.append(peer)

    # -- subscription plane ------------------------------------------------

    def subscribe(
        self,
        node: str,
        sub: Subscription,
        sink: str,
        callback: Callable[[Event], None],
    ) -> int:
        """Register a sink; returns a handle usable with unsubscribe()."""
        if not self.sim.alive(node):
            raise DeadNodeError(f"subscribe on dead node {node!r}")
        ls = _LocalSub(self._next_handle, node, sub, sink, callback)
        self._next_handle += 1
        self._local[node].append(ls)
        self._by_handle[ls.handle] = ls
        self._advertise(node, sub)
        return ls.handle

    def unsubscribe(self, handle: int) -> None:
        ls = self._by_handle.pop(handle, None)
        if ls is None:
            raise PubSubError(f"unknown subscription handle {handle}")
        self._local[ls.node].remove(ls)

    def _advertise(self, origin: str, sub: Subscription) -> None:
        for peer in self._adj.get(origin, []):
            self._forward_sub(origin, peer, sub)

    def _forward_sub(self, node: str, peer: str, sub: Subscription) -> None:
        lane = self._forwarded[node][peer]
        if self.covering_enabled and any(covers(prev, sub) for prev in lane):
            return
        lane.append(sub)
        self.sim.trace("pubsub.forward", node, {"what": "sub", "to": peer})
        self.sim.send(node, peer, _SubForward(sub))

    def _recv_sub(self, me: str, src: str, payload: _SubForward) -> None:
        # A stale lane (src no longer a tree neighbor after a rebuild) is
        # harmless: dispatch only consults lanes for current neighbors.
        self._interests.setdefault(me, {}).setdefault(src, []).append(payload.sub)
        for peer in self._adj.get(me, []):
            if peer != src:
                self._forward_sub(me, peer, payload.sub)

    def _recv_event(self, me: str, src: str, payload: _EventForward) -> None:
        self._dispatch(me, payload.event, src, payload.published_at)

    # -- event plane -------------------------------------------------------

    def make_event(
        self,
        type_name: str,
        attributes: dict[str, AttrValue],
        timestamp: MS | None = None,
        source: str = "",
    ) -> Event:
        ts = self.sim.now if timestamp is None else timestamp
        return Event(type_name, dict(attributes), ts, source, self.sim.next_event_id())

    def publish(self, node: str, event: Event) -> None:
        """Inject an event at a node's broker."""
        if not self.sim.alive(node):
            raise DeadNodeError(f"publish from dead node {node!r}")
        if event.timestamp > self.sim.now:
            raise PubSubError(
                f"event timestamp {event.timestamp} is in the future"
            )
        self.sim.trace(
            "pubsub.publish",
            node,
            {
                "event_id": event.event_id,
                "type": event.type_name,
                "attributes": attributes_to_jsonable(event.attributes),
                "ts": event.timestamp,
            },
        )
        self._dispatch(node, event, None, self.sim.now)

    def _dispatch(
        self, node: str, event: Event, from_peer: str | None, published_at: MS
    ) -> None:
        for ls in list(self._local.get(node, [])):
            if match(ls.sub, event):
                self.sim.trace(
                    "pubsub.deliver",
                    node,
                    {
                        "event_id": event.event_id,
                        "type": event.type_name,
                        "sink": ls.sink,
                        "latency_ms": self.sim.now - published_at,
                    },
                )
                ls.callback(event)
        for peer in self._adj.get(node, []):
            if peer == from_peer:
                continue
            if any(match(s, event) for s in self._interests[node].get(peer, [])):
                self.sim.trace(
                    "pubsub.forward",
                    node,
                    {"what": "event", "to": peer, "event_id": event.event_id},
                )
                self.sim.send(node, peer, _EventForward(event, published_at))


def attributes_to_jsonable(attributes: dict[str, AttrValue]) -> dict:
    out: dict[str, Any] = {}
    for name, value in attributes.items():
        if isinstance(value, Geo):
            out[name] = {"geo": [value.lat, value.lon]}
        else:
            out[name] = value
    return out
