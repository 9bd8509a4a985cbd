"""Correlation of event streams with stored facts.

A matchlet declares event patterns (each backed by a broker subscription),
fact queries joined against the knowledge base, guard predicates, and
templates for the events (and optionally facts) it emits when everything
lines up.

Evaluation happens on a single node. Each pattern keeps a buffer of recent
events; a new arrival is combined with every buffered event of the other
patterns, a combination is viable when all pairwise timestamp gaps fit the
matchlet's window, and each viable combination binds the pattern variables
and proceeds to the fact join. Fact queries resolve left to right, scanning
the kind's members in sorted-guid order, and the first full assignment that
passes every guard wins. A combination that already produced an emission
(keyed by the set of contributing event ids) is never emitted again.

Values in fact constraints, guards, and emit templates may be literals or
``${var.attr}`` references into the binding; ``${var.ts}`` names an event's
timestamp. Missing references make the enclosing predicate false rather than
raising.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .knowledge import KnowledgeBase, Fact
from .overlay import NotFoundError, guid_of
from .pubsub import (
    AttrValue,
    Event,
    EventFabric,
    Geo,
    Subscription,
    apply_op,
    attributes_to_jsonable,
    match,
)
from .pipeline import geo_distance
from .simkernel import MS, Simulation

COMBINATION_CAP = 10_000

# Events older than window plus this slack leave the buffers; the slack keeps
# combinations alive whose timestamp spread exactly equals the window while
# delivery latency is still trickling in.
PRUNE_GRACE_MS = 10_000

_REF_RE = re.compile(r"^\$\{([A-Za-z_][A-Za-z0-9_]*)\.([A-Za-z_][A-Za-z0-9_]*)\}$")

CMP_OPS = ("eq", "ne", "lt", "le", "gt", "ge")


class MatchingError(Exception):
    pass


@dataclass(frozen=True)
class Ref:
    """Reference to a bound variable's attribute, written ``${var.attr}``."""

    var: str
    attr: str

    def __str__(self) -> str:
        return "${" + self.var + "." + self.attr + "}"


def parse_ref(text: str) -> Ref | None:
    m = _REF_RE.match(text)
    if m is None:
        return None
    return Ref(m.group(1), m.group(2))


_MISSING = object()

Value = AttrValue  # literal leaf in templates/guards


def resolve(value: Any, binding: dict[str, Any]) -> Any:
    """Resolve a literal or Ref against the binding; missing becomes a sentinel."""
    if not isinstance(value, Ref):
        return value
    obj = binding.get(value.var)
    if obj is None:
        return _MISSING
    if isinstance(obj, Event):
        if value.attr == "ts":
            return obj.timestamp
        return obj.attributes.get(value.attr, _MISSING)
    if isinstance(obj, Fact):
        if value.attr == "subject":
            return obj.subject if obj.subject is not None else _MISSING
        return obj.body.get(value.attr, _MISSING)
    return _MISSING


@dataclass(frozen=True)
class Pattern:
    var: str
    subscription: Subscription


@dataclass(frozen=True)
class FactConstraint:
    name: str
    op: str
    value: Any  # AttrValue or Ref


@dataclass(frozen=True)
class FactQuery:
    var: str
    kind: str
    constraints: tuple[FactConstraint, ...] = ()


@dataclass(frozen=True)
class CmpGuard:
    lhs: Any
    op: str
    rhs: Any


@dataclass(frozen=True)
class GeoWithinGuard:
    point: Any
    center: Any
    radius_m: float


@dataclass(frozen=True)
class TimeDiffGuard:
    """Absolute gap between two timestamps compared against a bound."""

    a: Any
    b: Any
    op: str
    millis: int


@dataclass(frozen=True)
class ReachableGuard:
    """Can one walk from ``frm`` to ``to`` before ``deadline_ms``?"""

    frm: Any
    to: Any
    deadline_ms: Any
    speed_kmh: float | None = None


Guard = CmpGuard | GeoWithinGuard | TimeDiffGuard | ReachableGuard


@dataclass(frozen=True)
class EventTemplate:
    type_name: str
    attributes: dict[str, Any]


@dataclass(frozen=True)
class FactTemplate:
    kind: str
    body: dict[str, Any]
    subject: Any = None


@dataclass(frozen=True)
class Matchlet:
    matchlet_id: str
    patterns: tuple[Pattern, ...]
    window_ms: MS
    fact_queries: tuple[FactQuery, ...] = ()
    guards: tuple[Guard, ...] = ()
    emit_events: tuple[EventTemplate, ...] = ()
    emit_facts: tuple[FactTemplate, ...] = ()


def _iter_refs(value: Any) -> Iterable[Ref]:
    if isinstance(value, Ref):
        yield value


def validate_matchlet(m: Matchlet) -> None:
    if not m.patterns:
        raise MatchingError(f"{m.matchlet_id}: needs at least one event pattern")
    if m.window_ms <= 0:
        raise MatchingError(f"{m.matchlet_id}: window_ms must be positive")
    if not m.emit_events and not m.emit_facts:
        raise MatchingError(f"{m.matchlet_id}: emits nothing")
    seen: list[str] = [p.var for p in m.patterns]
    if len(set(seen)) != len(seen):
        raise MatchingError(f"{m.matchlet_id}: duplicate pattern variable")

    def check(ref: Ref, scope: list[str], where: str) -> None:
        if ref.var not in scope:
            raise MatchingError(f"{m.matchlet_id}: {where} references unknown var {ref}")

    for fq in m.fact_queries:
        if fq.var in seen:
            raise MatchingError(f"{m.matchlet_id}: duplicate variable {fq.var!r}")
        for c in fq.constraints:
            for ref in _iter_refs(c.value):
                check(ref, seen, f"fact query {fq.var!r}")
        seen.append(fq.var)
    for g in m.guards:
        parts: tuple[Any, ...]
        if isinstance(g, CmpGuard):
            if g.op not in CMP_OPS:
                raise MatchingError(f"{m.matchlet_id}: bad guard op {g.op!r}")
            parts = (g.lhs, g.rhs)
        elif isinstance(g, GeoWithinGuard):
            parts = (g.point, g.center)
        elif isinstance(g, TimeDiffGuard):
            if g.op not in CMP_OPS:
                raise MatchingError(f"{m.matchlet_id}: bad guard op {g.op!r}")
            parts = (g.a, g.b)
        elif isinstance(g, ReachableGuard):
            parts = (g.frm, g.to, g.deadline_ms)
        else:
            raise MatchingError(f"{m.matchlet_id}: unknown guard {g!r}")
        for part in parts:
            for ref in _iter_refs(part):
                check(ref, seen, "guard")
    for t in m.emit_events:
        for v in t.attributes.values():
            for ref in _iter_refs(v):
                check(ref, seen, f"template {t.type_name!r}")
    for ft in m.emit_facts:
        for v in list(ft.body.values()) + [ft.subject]:
            for ref in _iter_refs(v):
                check(ref, seen, f"fact template {ft.kind!r}")


def matchlet_directory_guid(type_name: str) -> str:
    """Directory slot mapping an event type to a deployable matchlet bundle."""
    return guid_of(f"matchlet:{type_name}".encode())


@dataclass
class _Instance:
    matchlet: Matchlet
    buffers: list[list[Event]]
    emitted: set[frozenset[str]] = field(default_factory=set)
    handles: list[int] = field(default_factory=list)


class MatchingEngine:
    """Per-node matchlet host. One engine instance serves one node."""

    def __init__(
        self,
        sim: Simulation,
        fabric: EventFabric,
        kb: KnowledgeBase,
        node: str,
        walking_speed_kmh: float = 5.0,
        combination_cap: int = COMBINATION_CAP,
    ):
        self.sim = sim
        self.fabric = fabric
        self.kb = kb
        self.node = node
        self.walking_speed_kmh = walking_speed_kmh
        self.combination_cap = combination_cap
        self.instances: dict[str, _Instance] = {}
        self._deployer: Callable[[str, bytes], str | None] | None = None
        self._discovery_handle: int | None = None

    # -- lifecycle -----------------------------------------------------------

    def register(self, m: Matchlet) -> None:
        validate_matchlet(m)
        if m.matchlet_id in self.instances:
            raise MatchingError(f"duplicate matchlet {m.matchlet_id!r}")
        inst = _Instance(m, [[] for _ in m.patterns])
        self.instances[m.matchlet_id] = inst
        for idx, pattern in enumerate(m.patterns):
            handle = self.fabric.subscribe(
                self.node,
                pattern.subscription,
                sink=f"{m.matchlet_id}#{pattern.var}",
                callback=lambda e, mid=m.matchlet_id, i=idx: self.on_event(mid, i, e),
            )
            inst.handles.append(handle)

    def unregister(self, matchlet_id: str) -> None:
        inst = self.instances.pop(matchlet_id, None)
        if inst is None:
            return
        for handle in inst.handles:
            self.fabric.unsubscribe(handle)

    # -- evaluation ------------------------------------------------------------

    def on_event(self, matchlet_id: str, pattern_idx: int, event: Event) -> None:
        inst = self.instances.get(matchlet_id)
        if inst is None:
            return
        m = inst.matchlet
        now = self.sim.now
        inst.buffers[pattern_idx].append(event)
        horizon = now - m.window_ms - PRUNE_GRACE_MS
        for buf in inst.buffers:
            buf[:] = [e for e in buf if e.timestamp >= horizon]

        sizes = [len(b) for b in inst.buffers]
        if 0 in sizes:
            return
        total = 1
        for s in sizes:
            total *= s
        if total > self.combination_cap:
            self.sim.trace(
                "match.overflow",
                self.node,
                {"matchlet": m.matchlet_id, "combinations": total, "cap": self.combination_cap},
            )
            return

        # Only combinations containing the new event can be new.
        pools: list[list[Event]] = list(inst.buffers)
        pools[pattern_idx] = [event]
        for combo in itertools.product(*pools):
            stamps = [e.timestamp for e in combo]
            if max(stamps) - min(stamps) > m.window_ms:
                continue
            key = frozenset(e.event_id for e in combo)
            if key in inst.emitted:
                continue
            binding = {p.var: e for p, e in zip(m.patterns, combo)}
            full = self._join_facts(inst, binding, 0)
            if full is None:
                continue
            inst.emitted.add(key)
            self._emit(inst, full, key)

    def _join_facts(
        self, inst: _Instance, binding: dict[str, Any], qi: int
    ) -> dict[str, Any] | None:
        m = inst.matchlet
        if qi == len(m.fact_queries):
            return binding if self._guards_pass(m, binding) else None
        fq = m.fact_queries[qi]
        for fact in self._query_facts(inst, fq, binding):
            out = self._join_facts(inst, {**binding, fq.var: fact}, qi + 1)
            if out is not None:
                return out
        return None

    def _query_facts(
        self, inst: _Instance, fq: FactQuery, binding: dict[str, Any]
    ) -> list[Fact]:
        found: list[Fact] = []
        for guid in self.kb.kind_members(self.node, fq.kind):
            try:
                fact = self.kb.get_fact(self.node, guid)
            except NotFoundError:
                self.sim.trace(
                    "match.fact_error",
                    self.node,
                    {"matchlet": inst.matchlet.matchlet_id, "guid": guid, "kind": fq.kind},
                )
                continue
            if all(self._fact_constraint(c, fact, binding) for c in fq.constraints):
                found.append(fact)
        return found

    def _fact_constraint(
        self, c: FactConstraint, fact: Fact, binding: dict[str, Any]
    ) -> bool:
        if c.name == "subject":
            actual: Any = fact.subject
        else:
            actual = fact.body.get(c.name, _MISSING)
        if actual is _MISSING or actual is None:
            return False
        wanted = resolve(c.value, binding)
        if wanted is _MISSING:
            return False
        if c.op == "exists":
            return True
        try:
            return apply_op(c.op, actual, wanted)
        except Exception:
            return False

    def _guards_pass(self, m: Matchlet, binding: dict[str, Any]) -> bool:
        for g in m.guards:
            if not self._eval_guard(m, g, binding):
                return False
        return True

    def _eval_guard(self, m: Matchlet, g: Guard, binding: dict[str, Any]) -> bool:
        try:
            if isinstance(g, CmpGuard):
                lhs = resolve(g.lhs, binding)
                rhs = resolve(g.rhs, binding)
                if lhs is _MISSING or rhs is _MISSING:
                    return False
                return apply_op(g.op, lhs, rhs)
            if isinstance(g, GeoWithinGuard):
                point = resolve(g.point, binding)
                center = resolve(g.center, binding)
                if not isinstance(point, Geo) or not isinstance(center, Geo):
                    return False
                return geo_distance(point, center) <= g.radius_m
            if isinstance(g, TimeDiffGuard):
                a = resolve(g.a, binding)
                b = resolve(g.b, binding)
                if not isinstance(a, (int, float)) or not isinstance(b, (int, float)):
                    return False
                return apply_op(g.op, abs(a - b), g.millis)
            if isinstance(g, ReachableGuard):
                frm = resolve(g.frm, binding)
                to = resolve(g.to, binding)
                deadline = resolve(g.deadline_ms, binding)
                if not isinstance(frm, Geo) or not isinstance(to, Geo):
                    return False
                if not isinstance(deadline, (int, float)) or isinstance(deadline, bool):
                    return False
                speed = g.speed_kmh if g.speed_kmh is not None else self.walking_speed_kmh
                if speed <= 0:
                    return False
                # speed [km/h] -> meters per ms is speed/3600; travel time in
                # ms is distance * 3600 / speed.
                travel_ms = geo_distance(frm, to) * 3600.0 / speed
                return travel_ms <= deadline - self.sim.now
        except Exception as exc:
            self.sim.trace(
                "match.guard_error",
                self.node,
                {"matchlet": m.matchlet_id, "guard": type(g).__name__, "error": str(exc)},
            )
            return False
        raise MatchingError(f"unknown guard {g!r}")

    # -- emission ------------------------------------------------------------

    def _emit(self, inst: _Instance, binding: dict[str, Any], key: frozenset[str]) -> None:
        m = inst.matchlet
        contributors = sorted(key)
        for ti, tmpl in enumerate(m.emit_events):
            attrs: dict[str, AttrValue] = {}
            for name, v in tmpl.attributes.items():
                got = resolve(v, binding)
                if got is _MISSING:
                    continue
                attrs[name] = got
            event = self.fabric.make_event(
                tmpl.type_name, attrs, timestamp=self.sim.now, source=self.node
            )
            self.sim.trace(
                "match.emit",
                self.node,
                {
                    "matchlet": m.matchlet_id,
                    "event_id": event.event_id,
                    "type": tmpl.type_name,
                    "attributes": attributes_to_jsonable(attrs),
                    "contributors": contributors,
                    "template": ti,
                },
            )
            self.fabric.publish(self.node, event)
        for ft in m.emit_facts:
            body: dict[str, Any] = {}
            for name, v in ft.body.items():
                got = resolve(v, binding)
                if got is _MISSING:
                    continue
                body[name] = got
            subject = resolve(ft.subject, binding) if ft.subject is not None else None
            if subject is _MISSING:
                subject = None
            self.kb.put_fact(self.node, Fact(ft.kind, body, subject=subject))

    # -- discovery ------------------------------------------------------------

    def enable_discovery(self, deployer: Callable[[str, bytes], str | None]) -> None:
        """Deploy a matchlet on demand when an unhandled event type shows up.

        ``deployer`` receives (node, bundle bytes) and returns the new
        matchlet's id, or None when deployment was rejected.
        """
        self._deployer = deployer
        if self._discovery_handle is None:
            self._discovery_handle = self.fabric.subscribe(
                self.node,
                Subscription("*"),
                sink="discovery",
                callback=self._on_discovery,
            )

    def _admits(self, type_name: str) -> bool:
        for inst in self.instances.values():
            for p in inst.matchlet.patterns:
                tp = p.subscription.type_pattern
                if tp == "*" or tp == type_name:
                    return True
        return False

    def _on_discovery(self, event: Event) -> None:
        if self._deployer is None or self._admits(event.type_name):
            return
        guid = matchlet_directory_guid(event.type_name)
        raw = self.kb.read_registry_item(self.node, guid, trace=False)
        if raw is None:
            self.sim.trace(
                "match.unhandled",
                self.node,
                {"type": event.type_name, "event_id": event.event_id},
            )
            return
        matchlet_id = self._deployer(self.node, raw)
        if matchlet_id is None:
            self.sim.trace(
                "match.unhandled",
                self.node,
                {"type": event.type_name, "event_id": event.event_id, "reason": "rejected"},
            )
            return
        self.sim.trace(
            "match.discovery_deploy",
            self.node,
            {"type": event.type_name, "matchlet": matchlet_id},
        )
        inst = self.instances.get(matchlet_id)
        if inst is None:
            return
        # The triggering event predates the new subscriptions; feed it to the
        # patterns it would have matched.
        for idx, pattern in enumerate(inst.matchlet.patterns):
            if match(pattern.subscription, event):
                self.on_event(matchlet_id, idx, event)
