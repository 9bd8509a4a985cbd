"""Event pipelines: small typed components wired into forwarding graphs.

Components accept events through ``put`` and forward results to their
declared outputs. An edge between components on the same node is a direct
call in the same simulated instant; an edge that crosses nodes rides the
kernel message plane, so it costs the pair's latency and preserves per-pair
FIFO order. Anything sent to a component on a dead node is counted and
dropped, never raised.

Built-in processing types:

``source``
    Replays a fixed schedule: at each entry's time it publishes the event to
    the node's broker and forwards it to its outputs.
``distance_filter``
    Emits an event only when its coordinate attribute has moved more than a
    threshold from the last emitted position. Events without the attribute
    feed an error counter instead of being forwarded.
``fanout_bus`` / ``relay``
    Forward every event to all outputs (a relay typically has one).
``buffer``
    Holds events and flushes them in arrival order on a fixed period,
    dropping the oldest beyond capacity (the drop is traced).

``matchlet`` and ``storelet`` components are owned by the matching and
knowledge layers; the pipeline delegates their input through registered sink
handlers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

from .pubsub import AttrValue, Event, EventFabric, Geo
from .simkernel import MS, Simulation

EARTH_RADIUS_M = 6_371_000.0

PROCESSING_TYPES = ("source", "distance_filter", "fanout_bus", "relay", "buffer")


class PipelineError(Exception):
    pass


def geo_distance(a: Geo, b: Geo) -> float:
    """Great-circle distance in meters (haversine on a spherical Earth)."""
    if not isinstance(a, Geo) or not isinstance(b, Geo):
        raise PipelineError("geo_distance needs two coordinates")
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.atan2(math.sqrt(h), math.sqrt(1 - h))


@dataclass
class ScheduleEntry:
    at: MS
    type_name: str
    attributes: dict[str, AttrValue]


@dataclass
class Component:
    component_id: str
    component_type: str
    node: str
    config: dict[str, Any] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    state: dict[str, Any] = field(default_factory=dict)


@dataclass
class _PipeDeliver:
    component_id: str
    event: Event


class PipelineEngine:
    """Registry and executor for pipeline components across all nodes."""

    def __init__(self, sim: Simulation, fabric: EventFabric):
        self.sim = sim
        self.fabric = fabric
        self.components: dict[str, Component] = {}
        self.drop_counts: dict[str, int] = {}
        self._sink_handlers: dict[str, Callable[[Component, Event], None]] = {}
        for name in sim.nodes:
            self._attach(name)
        sim.on_membership_change(self._on_membership)

    def _attach(self, name: str) -> None:
        self.sim.register_handler(
            name, _PipeDeliver, lambda src, p: self.put(p.component_id, p.event)
        )

    def _on_membership(self, kind: str, name: str) -> None:
        if kind == "join":
            self._attach(name)

    def register_sink_type(
        self, component_type: str, handler: Callable[[Component, Event], None]
    ) -> None:
        """Let another layer own a component type's event input."""
        self._sink_handlers[component_type] = handler

    # -- wiring ------------------------------------------------------------

    def add_component(self, component: Component) -> Component:
        c = component
        if c.component_id in self.components:
            raise PipelineError(f"duplicate component id {c.component_id!r}")
        self.sim.node(c.node)
        if c.component_type not in PROCESSING_TYPES and c.component_type not in self._sink_handlers:
            raise PipelineError(f"unknown component type {c.component_type!r}")
        self._validate_config(c)
        self.components[c.component_id] = c
        if c.component_type == "buffer":
            c.state["entries"] = []
            self.sim.every(
                int(c.config.get("flush_interval_ms", 1000)),
                lambda cid=c.component_id: self._flush_buffer(cid),
                node=c.node,
            )
        elif c.component_type == "distance_filter":
            c.state["last"] = None
            c.state["errors"] = 0
        elif c.component_type == "source":
            for entry in c.config["schedule"]:
                self.sim.schedule(
                    entry.at, lambda cid=c.component_id, e=entry: self._fire_source(cid, e)
                )
        return c

    def _validate_config(self, c: Component) -> None:
        if c.component_type == "distance_filter":
            threshold = c.config.get("threshold_m")
            if not isinstance(threshold, (int, float)) or threshold < 0:
                raise PipelineError(
                    f"{c.component_id}: threshold_m must be a non-negative number"
                )
            if not isinstance(c.config.get("geo_attr", "geo"), str):
                raise PipelineError(f"{c.component_id}: geo_attr must be a string")
        elif c.component_type == "buffer":
            cap = c.config.get("capacity")
            if not isinstance(cap, int) or cap < 1:
                raise PipelineError(f"{c.component_id}: capacity must be a positive int")
            flush = c.config.get("flush_interval_ms", 1000)
            if not isinstance(flush, int) or flush < 1:
                raise PipelineError(
                    f"{c.component_id}: flush_interval_ms must be a positive int"
                )
        elif c.component_type == "source":
            schedule = c.config.get("schedule")
            if not isinstance(schedule, list):
                raise PipelineError(f"{c.component_id}: source needs a schedule list")
            times = [entry.at for entry in schedule]
            if times != sorted(times):
                raise PipelineError(f"{c.component_id}: schedule times must be sorted")

    def connect(self, src_id: str, dst_id: str) -> None:
        src = self._get(src_id)
        dst = self._get(dst_id)
        if src_id == dst_id:
            raise PipelineError(f"{src_id}: self-loops are not allowed")
        if dst.component_type == "source":
            raise PipelineError(f"{dst_id}: sources take no input")
        if dst_id in src.outputs:
            raise PipelineError(f"edge {src_id} -> {dst_id} already exists")
        src.outputs.append(dst_id)

    def remove_component(self, component_id: str) -> None:
        self.components.pop(component_id, None)
        for other in self.components.values():
            if component_id in other.outputs:
                other.outputs.remove(component_id)

    def _get(self, component_id: str) -> Component:
        c = self.components.get(component_id)
        if c is None:
            raise PipelineError(f"unknown component {component_id!r}")
        return c

    # -- execution ------------------------------------------------------------

    def put(self, component_id: str, event: Event) -> None:
        """Hand an event to a component; drops (counted) if its node is dead."""
        c = self._get(component_id)
        if not self.sim.alive(c.node):
            self._drop(c, event, "dead_node")
            return
        self.sim.trace(
            "pipe.put", c.node, {"component": c.component_id, "event_id": event.event_id}
        )
        kind = c.component_type
        if kind in ("fanout_bus", "relay"):
            self._forward_all(c, event)
        elif kind == "distance_filter":
            self._filter(c, event)
        elif kind == "buffer":
            entries: list[Event] = c.state["entries"]
            entries.append(event)
            if len(entries) > c.config["capacity"]:
                dropped = entries.pop(0)
                self._drop(c, dropped, "overflow")
        elif kind == "source":
            raise PipelineError(f"{component_id}: sources take no input")
        else:
            self._sink_handlers[kind](c, event)

    def _filter(self, c: Component, event: Event) -> None:
        attr = c.config.get("geo_attr", "geo")
        position = event.attributes.get(attr)
        if not isinstance(position, Geo):
            c.state["errors"] += 1
            self._drop(c, event, "missing_geo")
            return
        last: Geo | None = c.state["last"]
        if last is not None:
            moved = geo_distance(last, position)
            if moved <= c.config["threshold_m"]:
                self.sim.trace(
                    "pipe.filter_suppress",
                    c.node,
                    {
                        "component": c.component_id,
                        "event_id": event.event_id,
                        "distance_m": moved,
                    },
                )
                return
        c.state["last"] = position
        self._forward_all(c, event)

    def _flush_buffer(self, component_id: str) -> None:
        c = self.components.get(component_id)
        if c is None or not self.sim.alive(c.node):
            return
        entries: list[Event] = c.state["entries"]
        c.state["entries"] = []
        for event in entries:
            self._forward_all(c, event)

    def _fire_source(self, component_id: str, entry: ScheduleEntry) -> None:
        c = self.components.get(component_id)
        if c is None or not self.sim.alive(c.node):
            return
        event = self.fabric.make_event(
            entry.type_name, entry.attributes, timestamp=self.sim.now, source=c.node
        )
        self.fabric.publish(c.node, event)
        self._forward_all(c, event)

    def _forward_all(self, c: Component, event: Event) -> None:
        for out_id in c.outputs:
            dst = self._get(out_id)
            if dst.node == c.node:
                self.put(out_id, event)
            else:
                self.sim.send(c.node, dst.node, _PipeDeliver(out_id, event))

    def _drop(self, c: Component, event: Event, reason: str) -> None:
        self.drop_counts[reason] = self.drop_counts.get(reason, 0) + 1
        self.sim.trace(
            "pipe.drop",
            c.node,
            {"component": c.component_id, "event_id": event.event_id, "reason": reason},
        )
