"""Scenario files, end-to-end runs, trace statistics, and outcome assertions.

A scenario is a JSON document naming nodes, policies, initial facts,
matchlets, pipeline components, sensor schedules, evolution constraints,
churn, and assertions. Loading normalizes every time literal to integer
milliseconds since the scenario epoch and validates the whole document with
path-qualified errors, so a bundle built from a loaded scenario is portable
and epoch-free.

Time literals: an int is milliseconds since epoch; "HH:MM" or "HH:MM:SS" is
that time of day on the epoch date; a full ISO datetime is converted
relative to the epoch (negative values are fine in attribute positions).

``run_scenario`` builds the full stack in declaration order, runs the clock,
and evaluates the scenario's assertions. ``stats`` and ``assert_outcomes``
work on plain record dicts, so they apply equally to a freshly produced
trace and to one re-read from a JSONL file.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any

from .deploy import (
    Bundle,
    DeployError,
    DeployInfra,
    EvolutionConstraint,
    EvolutionEngine,
    MaxLatency,
    MinInstances,
    ReplicaCount,
    bundle_from_bytes,
    bundle_to_bytes,
)
from .knowledge import Fact, KnowledgeBase
from .matching import (
    CmpGuard,
    EventTemplate,
    FactConstraint,
    FactQuery,
    FactTemplate,
    GeoWithinGuard,
    Matchlet,
    MatchingEngine,
    Pattern,
    ReachableGuard,
    Ref,
    TimeDiffGuard,
    matchlet_directory_guid,
    parse_ref,
    validate_matchlet,
)
from .overlay import Overlay, node_id_for
from .pipeline import PROCESSING_TYPES, Component, PipelineEngine, ScheduleEntry
from .pubsub import (
    OPERATORS,
    AttrValue,
    Constraint,
    EventFabric,
    Geo,
    Subscription,
    match as event_matches,
)
from .simkernel import MS, NodeProfile, Simulation, TraceRecord, trace_to_jsonl


class ScenarioError(Exception):
    """Raised for any structural or semantic problem in a scenario file."""


POLICY_DEFAULTS: dict[str, Any] = {
    "replica_k": 5,
    "t_heal_ms": 10_000,
    "t_hb_ms": 2_000,
    "cache_enabled": True,
    "cache_fraction": 0.25,
    "on_path_caching": False,
    "backup_policy": False,
    "latency_reduction": False,
    "access_threshold": 3,
    "access_window_ms": 60_000,
    "walking_speed_kmh": 5.0,
    "covering_enabled": True,
    "storelets": "all",
    "discovery_node": None,
}

GUARD_KINDS = ("cmp", "geo_within", "time_diff", "reachable")
ASSERTION_KINDS = (
    "event_emitted",
    "no_event",
    "replica_count_at",
    "constraint_satisfied_by",
    "metric_bound",
)


def _fail(where: str, message: str) -> ScenarioError:
    return ScenarioError(f"{where}: {message}")


def _require(data: dict, key: str, where: str) -> Any:
    if key not in data:
        raise _fail(where, f"missing required field {key!r}")
    return data[key]


# -- time and value normalization ---------------------------------------------


def parse_epoch(value: Any, where: str) -> datetime:
    if not isinstance(value, str):
        raise _fail(where, "epoch must be an ISO datetime string")
    try:
        return datetime.fromisoformat(value)
    except ValueError as exc:
        raise _fail(where, f"bad epoch {value!r}: {exc}") from None


def parse_time_ms(value: Any, epoch: datetime, where: str) -> int:
    """Normalize a time literal to int milliseconds since the epoch."""
    if isinstance(value, bool):
        raise _fail(where, "time literal cannot be a bool")
    if isinstance(value, int):
        return value
    if not isinstance(value, str):
        raise _fail(where, f"bad time literal {value!r}")
    try:
        if "T" in value:
            dt = datetime.fromisoformat(value)
        else:
            parts = value.split(":")
            if len(parts) not in (2, 3) or not all(p.isdigit() for p in parts):
                raise ValueError("expected HH:MM or HH:MM:SS")
            h, m = int(parts[0]), int(parts[1])
            s = int(parts[2]) if len(parts) == 3 else 0
            if h > 23 or m > 59 or s > 59:
                raise ValueError("time of day out of range")
            # a bare time of day falls on the epoch date
            dt = datetime.combine(epoch.date(), datetime.min.time().replace(hour=h, minute=m, second=s))
    except ValueError as exc:
        raise _fail(where, f"bad time literal {value!r}: {exc}") from None
    return int((dt - epoch).total_seconds() * 1000)


def norm_value(value: Any, epoch: datetime, where: str, refs_ok: bool = False) -> Any:
    """Normalize a scenario attribute value to its portable JSON form.

    Time wrappers collapse to ints; geo wrappers stay dicts; ``${var.attr}``
    strings survive untouched when refs are allowed in this position.
    """
    if isinstance(value, bool) or isinstance(value, (int, float)):
        return value
    if isinstance(value, str):
        if parse_ref(value) is not None and not refs_ok:
            raise _fail(where, f"reference {value!r} not allowed here")
        return value
    if isinstance(value, dict):
        if set(value) == {"geo"}:
            pair = value["geo"]
            if (
                not isinstance(pair, list)
                or len(pair) != 2
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in pair)
            ):
                raise _fail(where, f"geo must be [lat, lon], got {pair!r}")
            return {"geo": [float(pair[0]), float(pair[1])]}
        if set(value) == {"ms"}:
            return parse_time_ms(value["ms"], epoch, where)
        raise _fail(where, f"bad wrapped value {value!r}")
    raise _fail(where, f"unsupported value {value!r}")


def norm_attrs(
    attrs: Any, epoch: datetime, where: str, refs_ok: bool = False
) -> dict[str, Any]:
    if not isinstance(attrs, dict):
        raise _fail(where, "expected an object of attribute values")
    return {
        name: norm_value(v, epoch, f"{where}.{name}", refs_ok=refs_ok)
        for name, v in attrs.items()
    }


def build_attr(value: Any) -> AttrValue:
    """Turn a normalized JSON value into a runtime attribute value."""
    if isinstance(value, dict) and set(value) == {"geo"}:
        return Geo(value["geo"][0], value["geo"][1])
    return value


def build_value_or_ref(value: Any) -> Any:
    if isinstance(value, str):
        ref = parse_ref(value)
        if ref is not None:
            return ref
    return build_attr(value)


def build_body(body: dict[str, Any]) -> dict[str, AttrValue]:
    return {name: build_attr(v) for name, v in body.items()}


# -- matchlet definitions -----------------------------------------------------


def norm_constraint_triples(raw: Any, epoch: datetime, where: str, refs_ok: bool) -> list:
    if not isinstance(raw, list):
        raise _fail(where, "constraints must be a list of [name, op, value]")
    out = []
    for i, triple in enumerate(raw):
        w = f"{where}[{i}]"
        if not isinstance(triple, list) or len(triple) not in (2, 3):
            raise _fail(w, f"expected [name, op, value] or [name, op], got {triple!r}")
        name, op = triple[0], triple[1]
        if not isinstance(name, str) or op not in OPERATORS:
            raise _fail(w, f"bad constraint {triple!r}")
        if op == "exists":
            out.append([name, op, None])
        elif len(triple) != 3:
            raise _fail(w, f"operator {op!r} needs a value")
        else:
            out.append([name, op, norm_value(triple[2], epoch, w, refs_ok=refs_ok)])
    return out


def norm_matchlet_def(raw: Any, epoch: datetime, where: str) -> dict[str, Any]:
    if not isinstance(raw, dict):
        raise _fail(where, "matchlet must be an object")
    out: dict[str, Any] = {
        "id": _require(raw, "id", where),
        "window_ms": _require(raw, "window_ms", where),
    }
    if not isinstance(out["id"], str):
        raise _fail(where, "id must be a string")
    if not isinstance(out["window_ms"], int) or out["window_ms"] <= 0:
        raise _fail(where, "window_ms must be a positive int")
    patterns = _require(raw, "patterns", where)
    if not isinstance(patterns, list) or not patterns:
        raise _fail(where, "patterns must be a non-empty list")
    out["patterns"] = []
    for i, p in enumerate(patterns):
        w = f"{where}.patterns[{i}]"
        out["patterns"].append(
            {
                "var": _require(p, "var", w),
                "type": _require(p, "type", w),
                "constraints": norm_constraint_triples(
                    p.get("constraints", []), epoch, f"{w}.constraints", refs_ok=False
                ),
            }
        )
    out["facts"] = []
    for i, f in enumerate(raw.get("facts", [])):
        w = f"{where}.facts[{i}]"
        out["facts"].append(
            {
                "var": _require(f, "var", w),
                "kind": _require(f, "kind", w),
                "where": norm_constraint_triples(
                    f.get("where", []), epoch, f"{w}.where", refs_ok=True
                ),
            }
        )
    out["guards"] = []
    for i, g in enumerate(raw.get("guards", [])):
        w = f"{where}.guards[{i}]"
        if not isinstance(g, dict) or g.get("kind") not in GUARD_KINDS:
            raise _fail(w, f"guard kind must be one of {GUARD_KINDS}")
        kind = g["kind"]
        ng: dict[str, Any] = {"kind": kind}
        if kind == "cmp":
            ng["lhs"] = norm_value(_require(g, "lhs", w), epoch, f"{w}.lhs", refs_ok=True)
            ng["op"] = _require(g, "op", w)
            ng["rhs"] = norm_value(_require(g, "rhs", w), epoch, f"{w}.rhs", refs_ok=True)
        elif kind == "geo_within":
            ng["point"] = norm_value(_require(g, "point", w), epoch, f"{w}.point", refs_ok=True)
            ng["center"] = norm_value(_require(g, "center", w), epoch, f"{w}.center", refs_ok=True)
            radius = _require(g, "radius_m", w)
            if not isinstance(radius, (int, float)) or isinstance(radius, bool) or radius < 0:
                raise _fail(w, "radius_m must be a non-negative number")
            ng["radius_m"] = radius
        elif kind == "time_diff":
            ng["a"] = norm_value(_require(g, "a", w), epoch, f"{w}.a", refs_ok=True)
            ng["b"] = norm_value(_require(g, "b", w), epoch, f"{w}.b", refs_ok=True)
            ng["op"] = _require(g, "op", w)
            millis = _require(g, "millis", w)
            if not isinstance(millis, int) or isinstance(millis, bool) or millis < 0:
                raise _fail(w, "millis must be a non-negative int")
            ng["millis"] = millis
        else:
            ng["from"] = norm_value(_require(g, "from", w), epoch, f"{w}.from", refs_ok=True)
            ng["to"] = norm_value(_require(g, "to", w), epoch, f"{w}.to", refs_ok=True)
            deadline = _require(g, "deadline_ms", w)
            if isinstance(deadline, str) and parse_ref(deadline) is not None:
                ng["deadline_ms"] = deadline
            else:
                ng["deadline_ms"] = parse_time_ms(deadline, epoch, f"{w}.deadline_ms")
            if "speed_kmh" in g:
                speed = g["speed_kmh"]
                if not isinstance(speed, (int, float)) or isinstance(speed, bool) or speed <= 0:
                    raise _fail(w, "speed_kmh must be a positive number")
                ng["speed_kmh"] = speed
        out["guards"].append(ng)
    out["emit"] = []
    for i, t in enumerate(raw.get("emit", [])):
        w = f"{where}.emit[{i}]"
        out["emit"].append(
            {
                "type": _require(t, "type", w),
                "attributes": norm_attrs(
                    t.get("attributes", {}), epoch, f"{w}.attributes", refs_ok=True
                ),
            }
        )
    out["emit_facts"] = []
    for i, t in enumerate(raw.get("emit_facts", [])):
        w = f"{where}.emit_facts[{i}]"
        entry: dict[str, Any] = {
            "kind": _require(t, "kind", w),
            "body": norm_attrs(t.get("body", {}), epoch, f"{w}.body", refs_ok=True),
        }
        if "subject" in t and t["subject"] is not None:
            entry["subject"] = norm_value(t["subject"], epoch, f"{w}.subject", refs_ok=True)
        out["emit_facts"].append(entry)
    return out


def build_subscription(pattern: dict[str, Any]) -> Subscription:
    constraints = tuple(
        Constraint(name, op, build_attr(value))
        for name, op, value in pattern["constraints"]
    )
    return Subscription(pattern["type"], constraints)


def build_matchlet(defn: dict[str, Any]) -> Matchlet:
    """Turn a normalized matchlet definition into the runtime object."""
    patterns = tuple(Pattern(p["var"], build_subscription(p)) for p in defn["patterns"])
    queries = tuple(
        FactQuery(
            f["var"],
            f["kind"],
            tuple(
                FactConstraint(name, op, build_value_or_ref(v))
                for name, op, v in f["where"]
            ),
        )
        for f in defn["facts"]
    )
    guards: list[Any] = []
    for g in defn["guards"]:
        if g["kind"] == "cmp":
            guards.append(
                CmpGuard(build_value_or_ref(g["lhs"]), g["op"], build_value_or_ref(g["rhs"]))
            )
        elif g["kind"] == "geo_within":
            guards.append(
                GeoWithinGuard(
                    build_value_or_ref(g["point"]),
                    build_value_or_ref(g["center"]),
                    float(g["radius_m"]),
                )
            )
        elif g["kind"] == "time_diff":
            guards.append(
                TimeDiffGuard(
                    build_value_or_ref(g["a"]),
                    build_value_or_ref(g["b"]),
                    g["op"],
                    g["millis"],
                )
            )
        else:
            guards.append(
                ReachableGuard(
                    build_value_or_ref(g["from"]),
                    build_value_or_ref(g["to"]),
                    build_value_or_ref(g["deadline_ms"]),
                    g.get("speed_kmh"),
                )
            )
    emit_events = tuple(
        EventTemplate(
            t["type"], {k: build_value_or_ref(v) for k, v in t["attributes"].items()}
        )
        for t in defn["emit"]
    )
    emit_facts = tuple(
        FactTemplate(
            t["kind"],
            {k: build_value_or_ref(v) for k, v in t["body"].items()},
            build_value_or_ref(t["subject"]) if "subject" in t else None,
        )
        for t in defn["emit_facts"]
    )
    return Matchlet(
        matchlet_id=defn["id"],
        patterns=patterns,
        window_ms=defn["window_ms"],
        fact_queries=queries,
        guards=tuple(guards),
        emit_events=emit_events,
        emit_facts=emit_facts,
    )


# -- scenario loading -----------------------------------------------------------


@dataclass
class Scenario:
    name: str
    description: str
    epoch: str
    seed: int
    until_ms: int | None
    nodes: list[dict[str, Any]]
    policies: dict[str, Any]
    facts: list[dict[str, Any]]
    matchlets: list[dict[str, Any]]
    directory: list[dict[str, Any]]
    components: list[dict[str, Any]]
    sensors: list[dict[str, Any]]
    constraints: list[dict[str, Any]]
    churn: list[dict[str, Any]]
    assertions: list[dict[str, Any]]


def load_scenario_file(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise ScenarioError(f"{p}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: not valid JSON: {exc}") from None
    return load_scenario(data)


def load_scenario(data: Any) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    name = data.get("name", "unnamed")
    epoch = parse_epoch(data.get("epoch", "1970-01-01T00:00:00"), "epoch")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise _fail("seed", "must be an int")
    until_ms = (
        parse_time_ms(data["until"], epoch, "until") if "until" in data else None
    )
    if until_ms is not None and until_ms < 0:
        raise _fail("until", "must not be negative")

    nodes = _load_nodes(data.get("nodes"), "nodes")
    node_names = {n["name"] for n in nodes}
    policies = _load_policies(data.get("policies", {}), node_names)
    facts = _load_facts(data.get("facts", []), epoch, node_names)
    matchlets = []
    for i, raw in enumerate(data.get("matchlets", [])):
        w = f"matchlets[{i}]"
        node = _require(raw, "node", w)
        if node not in node_names:
            raise _fail(w, f"unknown node {node!r}")
        defn = norm_matchlet_def(raw, epoch, w)
        validate_matchlet(build_matchlet(defn))
        matchlets.append({"node": node, "definition": defn})
    directory = []
    for i, raw in enumerate(data.get("directory", [])):
        w = f"directory[{i}]"
        types = _require(raw, "types", w)
        if not isinstance(types, list) or not all(isinstance(t, str) for t in types):
            raise _fail(w, "types must be a list of event type names")
        defn = norm_matchlet_def(_require(raw, "matchlet", w), epoch, f"{w}.matchlet")
        validate_matchlet(build_matchlet(defn))
        directory.append({"types": types, "definition": defn})
    components = _load_components(data.get("components", []), epoch, node_names)
    sensors = _load_sensors(data.get("sensors", []), epoch, node_names)
    _check_edges(components, sensors)
    constraints = _load_constraints(data.get("constraints", []))
    churn = _load_churn(data.get("churn", []), epoch, node_names)
    assertions = _load_assertions(data.get("assertions", []), epoch, node_names)
    return Scenario(
        name=name,
        description=data.get("description", ""),
        epoch=epoch.isoformat(),
        seed=seed,
        until_ms=until_ms,
        nodes=nodes,
        policies=policies,
        facts=facts,
        matchlets=matchlets,
        directory=directory,
        components=components,
        sensors=sensors,
        constraints=constraints,
        churn=churn,
        assertions=assertions,
    )


def _load_nodes(raw: Any, where: str) -> list[dict[str, Any]]:
    if not isinstance(raw, list) or not raw:
        raise _fail(where, "scenario needs a non-empty node list")
    nodes = []
    seen = set()
    for i, n in enumerate(raw):
        w = f"{where}[{i}]"
        name = _require(n, "name", w)
        if not isinstance(name, str) or not name:
            raise _fail(w, "name must be a non-empty string")
        if name in seen:
            raise _fail(w, f"duplicate node name {name!r}")
        seen.add(name)
        region = _require(n, "region", w)
        if not isinstance(region, str) or not region:
            raise _fail(w, "region must be a non-empty string")
        entry = {
            "name": name,
            "region": region,
            "lat": n.get("lat", 0.0),
            "lon": n.get("lon", 0.0),
            "storage_slots": n.get("storage_slots", 64),
            "compute_slots": n.get("compute_slots", 16),
            "allow_types": n.get("allow_types"),
        }
        for f in ("lat", "lon"):
            if not isinstance(entry[f], (int, float)) or isinstance(entry[f], bool):
                raise _fail(w, f"{f} must be a number")
        for f in ("storage_slots", "compute_slots"):
            if not isinstance(entry[f], int) or entry[f] < 0:
                raise _fail(w, f"{f} must be a non-negative int")
        if entry["allow_types"] is not None and (
            not isinstance(entry["allow_types"], list)
            or not all(isinstance(t, str) for t in entry["allow_types"])
        ):
            raise _fail(w, "allow_types must be a list of component types")
        nodes.append(entry)
    return nodes


def _load_policies(raw: Any, node_names: set[str]) -> dict[str, Any]:
    if not isinstance(raw, dict):
        raise _fail("policies", "must be an object")
    unknown = set(raw) - set(POLICY_DEFAULTS)
    if unknown:
        raise _fail("policies", f"unknown keys {sorted(unknown)}")
    pol = {**POLICY_DEFAULTS, **raw}
    storelets = pol["storelets"]
    if storelets != "all":
        if not isinstance(storelets, list) or not all(
            s in node_names for s in storelets
        ):
            raise _fail("policies.storelets", 'must be "all" or a list of node names')
    if pol["discovery_node"] is not None and pol["discovery_node"] not in node_names:
        raise _fail("policies.discovery_node", f"unknown node {pol['discovery_node']!r}")
    return pol


def _load_facts(
    raw: Any, epoch: datetime, node_names: set[str]
) -> list[dict[str, Any]]:
    if not isinstance(raw, list):
        raise _fail("facts", "must be a list")
    facts = []
    for i, f in enumerate(raw):
        w = f"facts[{i}]"
        kind = _require(f, "kind", w)
        if not isinstance(kind, str) or not kind:
            raise _fail(w, "kind must be a non-empty string")
        subject = f.get("subject")
        if subject is not None and not isinstance(subject, str):
            raise _fail(w, "subject must be a string")
        origin = f.get("origin")
        if origin is not None and origin not in node_names:
            raise _fail(w, f"unknown origin node {origin!r}")
        facts.append(
            {
                "kind": kind,
                "subject": subject,
                "origin": origin,
                "body": norm_attrs(f.get("body", {}), epoch, f"{w}.body"),
            }
        )
    return facts


def _norm_component_config(
    ctype: str, raw: Any, epoch: datetime, where: str
) -> dict[str, Any]:
    config = dict(raw) if isinstance(raw, dict) else None
    if config is None:
        raise _fail(where, "config must be an object")
    if ctype == "source":
        schedule = config.get("schedule")
        if not isinstance(schedule, list):
            raise _fail(where, "source config needs a schedule list")
        normed = []
        last = None
        for i, entry in enumerate(schedule):
            w = f"{where}.schedule[{i}]"
            at = parse_time_ms(_require(entry, "at", w), epoch, f"{w}.at")
            if at < 0:
                raise _fail(w, "schedule times must not be negative")
            if last is not None and at < last:
                raise _fail(w, "schedule must be time-sorted")
            last = at
            normed.append(
                {
                    "at": at,
                    "type": _require(entry, "type", w),
                    "attributes": norm_attrs(
                        entry.get("attributes", {}), epoch, f"{w}.attributes"
                    ),
                }
            )
        config["schedule"] = normed
    elif ctype == "distance_filter":
        threshold = config.get("threshold_m")
        if not isinstance(threshold, (int, float)) or isinstance(threshold, bool) or threshold < 0:
            raise _fail(where, "threshold_m must be a non-negative number")
    elif ctype == "buffer":
        if not isinstance(config.get("capacity"), int) or config["capacity"] < 1:
            raise _fail(where, "capacity must be a positive int")
        flush = config.get("flush_interval_ms", 1000)
        if not isinstance(flush, int) or flush < 1:
            raise _fail(where, "flush_interval_ms must be a positive int")
    return config


def _load_components(
    raw: Any, epoch: datetime, node_names: set[str]
) -> list[dict[str, Any]]:
    if not isinstance(raw, list):
        raise _fail("components", "must be a list")
    out = []
    for i, c in enumerate(raw):
        w = f"components[{i}]"
        cid = _require(c, "id", w)
        ctype = _require(c, "type", w)
        node = _require(c, "node", w)
        if ctype not in PROCESSING_TYPES:
            raise _fail(w, f"type must be one of {PROCESSING_TYPES}")
        if node not in node_names:
            raise _fail(w, f"unknown node {node!r}")
        outputs = c.get("outputs", [])
        if not isinstance(outputs, list) or not all(isinstance(o, str) for o in outputs):
            raise _fail(w, "outputs must be a list of component ids")
        out.append(
            {
                "id": cid,
                "type": ctype,
                "node": node,
                "config": _norm_component_config(
                    ctype, c.get("config", {}), epoch, f"{w}.config"
                ),
                "outputs": outputs,
            }
        )
    return out


def _load_sensors(
    raw: Any, epoch: datetime, node_names: set[str]
) -> list[dict[str, Any]]:
    """Sensors are sugar for source components."""
    if not isinstance(raw, list):
        raise _fail("sensors", "must be a list")
    out = []
    for i, s in enumerate(raw):
        w = f"sensors[{i}]"
        node = _require(s, "node", w)
        if node not in node_names:
            raise _fail(w, f"unknown node {node!r}")
        out.append(
            {
                "id": _require(s, "id", w),
                "type": "source",
                "node": node,
                "config": _norm_component_config(
                    "source", {"schedule": _require(s, "schedule", w)}, epoch, w
                ),
                "outputs": s.get("outputs", []),
            }
        )
    return out


def _check_edges(components: list[dict], sensors: list[dict]) -> None:
    ids = {c["id"] for c in components} | {s["id"] for s in sensors}
    if len(ids) != len(components) + len(sensors):
        raise _fail("components", "component/sensor ids must be unique")
    for c in components + sensors:
        for out in c["outputs"]:
            if out not in ids:
                raise _fail(f"components[{c['id']}]", f"unknown output {out!r}")


def _load_constraints(raw: Any) -> list[dict[str, Any]]:
    if not isinstance(raw, list):
        raise _fail("constraints", "must be a list")
    out = []
    for i, c in enumerate(raw):
        w = f"constraints[{i}]"
        kind = _require(c, "kind", w)
        if kind == "min_instances":
            entry = {
                "kind": kind,
                "type": _require(c, "type", w),
                "region": _require(c, "region", w),
                "n": _require(c, "n", w),
            }
            if not isinstance(entry["n"], int) or entry["n"] < 1:
                raise _fail(w, "n must be a positive int")
        elif kind == "replica_count":
            entry = {"kind": kind, "fact_kind": _require(c, "fact_kind", w), "k": _require(c, "k", w)}
            if not isinstance(entry["k"], int) or entry["k"] < 1:
                raise _fail(w, "k must be a positive int")
        elif kind == "max_latency":
            entry = {
                "kind": kind,
                "src_type": _require(c, "src_type", w),
                "dst_type": _require(c, "dst_type", w),
                "ms": _require(c, "ms", w),
            }
            if not isinstance(entry["ms"], int) or entry["ms"] < 1:
                raise _fail(w, "ms must be a positive int")
        else:
            raise _fail(w, f"unknown constraint kind {kind!r}")
        out.append(entry)
    return out


def _load_churn(
    raw: Any, epoch: datetime, node_names: set[str]
) -> list[dict[str, Any]]:
    if not isinstance(raw, list):
        raise _fail("churn", "must be a list")
    out = []
    for i, c in enumerate(raw):
        w = f"churn[{i}]"
        op = _require(c, "op", w)
        node = _require(c, "node", w)
        if op not in ("crash", "leave"):
            raise _fail(w, f"op must be crash or leave, got {op!r}")
        if node not in node_names:
            raise _fail(w, f"unknown node {node!r}")
        at = parse_time_ms(_require(c, "at", w), epoch, f"{w}.at")
        if at < 0:
            raise _fail(w, "churn times must not be negative")
        out.append({"at": at, "op": op, "node": node})
    return out


def _load_assertions(
    raw: Any, epoch: datetime, node_names: set[str]
) -> list[dict[str, Any]]:
    if not isinstance(raw, list):
        raise _fail("assertions", "must be a list")
    out = []
    for i, a in enumerate(raw):
        w = f"assertions[{i}]"
        kind = _require(a, "kind", w)
        if kind not in ASSERTION_KINDS:
            raise _fail(w, f"unknown assertion kind {kind!r}")
        entry: dict[str, Any] = {"kind": kind}
        if kind in ("event_emitted", "no_event"):
            entry["type"] = _require(a, "type", w)
            if "where" in a:
                entry["where"] = norm_attrs(a["where"], epoch, f"{w}.where")
            if "node" in a:
                if a["node"] not in node_names:
                    raise _fail(w, f"unknown node {a['node']!r}")
                entry["node"] = a["node"]
            if kind == "event_emitted":
                for f in ("not_before", "by"):
                    if f in a:
                        entry[f] = parse_time_ms(a[f], epoch, f"{w}.{f}")
                entry["min_count"] = a.get("min_count", 1)
                if not isinstance(entry["min_count"], int) or entry["min_count"] < 1:
                    raise _fail(w, "min_count must be a positive int")
            else:
                for f in ("from", "before"):
                    if f in a:
                        entry[f] = parse_time_ms(a[f], epoch, f"{w}.{f}")
        elif kind == "replica_count_at":
            entry["fact_kind"] = _require(a, "fact_kind", w)
            if "subject" in a:
                entry["subject"] = a["subject"]
            entry["at"] = parse_time_ms(_require(a, "at", w), epoch, f"{w}.at")
            entry["min"] = _require(a, "min", w)
            if not isinstance(entry["min"], int) or entry["min"] < 1:
                raise _fail(w, "min must be a positive int")
        elif kind == "constraint_satisfied_by":
            entry["constraint"] = _require(a, "constraint", w)
            entry["by"] = parse_time_ms(_require(a, "by", w), epoch, f"{w}.by")
        else:
            entry["metric"] = _require(a, "metric", w)
            if "max" not in a and "min" not in a:
                raise _fail(w, "metric_bound needs max and/or min")
            for f in ("max", "min"):
                if f in a:
                    if not isinstance(a[f], (int, float)) or isinstance(a[f], bool):
                        raise _fail(w, f"{f} must be a number")
                    entry[f] = a[f]
        out.append(entry)
    return out


# -- runtime assembly -----------------------------------------------------------


@dataclass
class Runtime:
    scenario: Scenario
    sim: Simulation
    overlay: Overlay
    fabric: EventFabric
    pipeline: PipelineEngine
    kb: KnowledgeBase
    deploy: DeployInfra
    engines: dict[str, MatchingEngine] = field(default_factory=dict)
    evolution: list[EvolutionEngine] = field(default_factory=list)
    bundles: list[Bundle] = field(default_factory=list)

    def engine_for(self, node: str) -> MatchingEngine:
        engine = self.engines.get(node)
        if engine is None:
            engine = MatchingEngine(
                self.sim,
                self.fabric,
                self.kb,
                node,
                walking_speed_kmh=self.scenario.policies["walking_speed_kmh"],
            )
            self.engines[node] = engine
        return engine


def _build_schedule(config: dict[str, Any]) -> dict[str, Any]:
    built = dict(config)
    built["schedule"] = [
        ScheduleEntry(e["at"], e["type"], build_body(e["attributes"]))
        for e in config["schedule"]
    ]
    return built


def setup(scenario: Scenario, seed: int | None = None) -> Runtime:
    """Build the whole stack at t=0, in scenario declaration order."""
    s = scenario
    pol = s.policies
    sim = Simulation(seed if seed is not None else s.seed)
    for nd in s.nodes:
        sim.add_node(
            NodeProfile(
                name=nd["name"],
                node_id=node_id_for(nd["name"]),
                region=nd["region"],
                lat=float(nd["lat"]),
                lon=float(nd["lon"]),
                storage_slots=nd["storage_slots"],
                compute_slots=nd["compute_slots"],
            )
        )
    overlay = Overlay(sim)
    overlay.on_path_caching = pol["on_path_caching"]
    fabric = EventFabric(sim, covering_enabled=pol["covering_enabled"])
    pipeline = PipelineEngine(sim, fabric)
    kb = KnowledgeBase(
        sim,
        overlay,
        replica_k=pol["replica_k"],
        t_heal_ms=pol["t_heal_ms"],
        cache_enabled=pol["cache_enabled"],
        cache_fraction=pol["cache_fraction"],
        backup_policy=pol["backup_policy"],
        latency_policy=pol["latency_reduction"],
        access_threshold=pol["access_threshold"],
        access_window_ms=pol["access_window_ms"],
    )
    deploy = DeployInfra(sim, fabric, kb, t_hb_ms=pol["t_hb_ms"])
    rt = Runtime(s, sim, overlay, fabric, pipeline, kb, deploy)

    def matchlet_sink(component: Component, event: Any) -> None:
        engine = rt.engines.get(component.node)
        if engine is None:
            return
        inst = engine.instances.get(component.component_id)
        if inst is None:
            return
        for idx, pattern in enumerate(inst.matchlet.patterns):
            if event_matches(pattern.subscription, event):
                engine.on_event(component.component_id, idx, event)

    pipeline.register_sink_type("matchlet", matchlet_sink)

    def inst_matchlet(node: str, defn: dict[str, Any]) -> str:
        m = build_matchlet(defn)
        rt.engine_for(node).register(m)
        pipeline.add_component(Component(defn["id"], "matchlet", node))
        return defn["id"]

    def off_matchlet(node: str, cid: str) -> None:
        rt.engine_for(node).unregister(cid)
        pipeline.remove_component(cid)

    deploy.register_component_type("matchlet", inst_matchlet, off_matchlet)

    def inst_storelet(node: str, defn: dict[str, Any]) -> str:
        kb.enable_storage(node)
        return defn["id"]

    deploy.register_component_type(
        "storelet", inst_storelet, lambda node, cid: kb.disable_storage(node)
    )

    def make_pipeline_inst(ctype: str) -> Any:
        def inst(node: str, defn: dict[str, Any]) -> str:
            config = defn.get("config", {})
            if ctype == "source":
                config = _build_schedule(config)
            pipeline.add_component(Component(defn["id"], ctype, node, config))
            return defn["id"]

        return inst

    for ctype in PROCESSING_TYPES:
        deploy.register_component_type(
            ctype, make_pipeline_inst(ctype), lambda node, cid: pipeline.remove_component(cid)
        )

    for nd in s.nodes:
        deploy.install_infrastructure(nd["name"])
        if nd["allow_types"] is not None:
            deploy.set_allowed_types(nd["name"], set(nd["allow_types"]))

    storelet_hosts = (
        [nd["name"] for nd in s.nodes] if pol["storelets"] == "all" else pol["storelets"]
    )
    storelet_template = Bundle.create(
        "storelet.template", "storelet", {"id": "storelet.template"},
        required_compute=0,
    )
    rt.bundles.append(storelet_template)
    for host in storelet_hosts:
        bundle = Bundle.create(
            f"storelet.{host}", "storelet", {"id": f"storelet.{host}"}, required_compute=0
        )
        deploy.deploy_bundle(host, bundle)

    default_origin = s.nodes[0]["name"]
    for f in s.facts:
        origin = f["origin"] or default_origin
        kb.put_fact(origin, Fact(f["kind"], build_body(f["body"]), subject=f["subject"]))

    for entry in s.directory:
        bundle = Bundle.create(
            f"dir.{entry['definition']['id']}", "matchlet", entry["definition"]
        )
        raw = bundle_to_bytes(bundle)
        for type_name in entry["types"]:
            kb.write_registry_item(default_origin, matchlet_directory_guid(type_name), raw)

    for md in s.matchlets:
        bundle = Bundle.create(
            f"matchlet.{md['definition']['id']}", "matchlet", md["definition"]
        )
        rt.bundles.append(bundle)
        deploy.deploy_bundle(md["node"], bundle)

    if pol["discovery_node"] is not None:

        def discovery_deployer(node: str, raw: bytes) -> str | None:
            try:
                bundle = bundle_from_bytes(raw)
            except (ValueError, KeyError, TypeError):
                return None
            try:
                return deploy.deploy_bundle(node, bundle)
            except DeployError:
                return None

        rt.engine_for(pol["discovery_node"]).enable_discovery(discovery_deployer)

    for c in s.components + s.sensors:
        bundle = Bundle.create(
            f"cmp.{c['id']}", c["type"], {"id": c["id"], "config": c["config"]}
        )
        rt.bundles.append(bundle)
        deploy.deploy_bundle(c["node"], bundle)
    for c in s.components + s.sensors:
        for out in c["outputs"]:
            pipeline.connect(c["id"], out)

    if s.constraints:
        regions = sorted({nd["region"] for nd in s.nodes})
        built: list[EvolutionConstraint] = []
        for c in s.constraints:
            if c["kind"] == "min_instances":
                built.append(MinInstances(c["type"], c["region"], c["n"]))
            elif c["kind"] == "replica_count":
                built.append(ReplicaCount(c["fact_kind"], c["k"]))
            else:
                built.append(MaxLatency(c["src_type"], c["dst_type"], c["ms"]))
        for region in regions:
            applicable = [
                c
                for c in built
                if (isinstance(c, MinInstances) and c.region == region)
                or (isinstance(c, ReplicaCount) and region == regions[0])
                or isinstance(c, MaxLatency)
            ]
            if not applicable:
                continue
            hosts = sorted(
                n for n in deploy.installed
                if sim.alive(n) and sim.node(n).region == region
            )
            if not hosts:
                continue
            engine = EvolutionEngine(
                sim, deploy, kb, fabric, region, hosts[0], applicable, rt.bundles
            )
            rt.evolution.append(engine)
            engine.evaluate()

    for c in s.churn:
        if c["op"] == "crash":
            sim.crash(c["node"], at=c["at"])
        else:
            sim.leave(c["node"], at=c["at"])

    kb.start_heal()
    kb.start_policy_monitor()
    return rt


# -- running ------------------------------------------------------------------


@dataclass
class RunResult:
    name: str
    seed: int
    until_ms: int
    records: list[TraceRecord]
    counters: dict[str, int]
    metrics: dict[str, Any]
    assertions: list[dict[str, Any]]
    ok: bool

    @property
    def trace_jsonl(self) -> str:
        return trace_to_jsonl(self.records)


def records_to_dicts(records: list[TraceRecord]) -> list[dict[str, Any]]:
    return [{"t": r.t, "kind": r.kind, "node": r.node, "detail": r.detail} for r in records]


def run_scenario(
    scenario: Scenario, seed: int | None = None, until: int | None = None
) -> RunResult:
    used_seed = seed if seed is not None else scenario.seed
    until_ms = until if until is not None else scenario.until_ms
    if until_ms is None:
        raise ScenarioError("no run horizon: scenario has no 'until' and none was given")
    rt = setup(scenario, seed=used_seed)
    records = rt.sim.run_until(until_ms)
    dicts = records_to_dicts(records)
    metrics = stats(dicts)
    results = assert_outcomes(dicts, scenario.assertions)
    return RunResult(
        name=scenario.name,
        seed=used_seed,
        until_ms=until_ms,
        records=records,
        counters={
            "sent": rt.sim.counters.sent,
            "delivered": rt.sim.counters.delivered,
            "dropped": rt.sim.counters.dropped,
        },
        metrics=metrics,
        assertions=results,
        ok=all(r["ok"] for r in results),
    )


# -- statistics ------------------------------------------------------------------


def _percentile(values: list[float], q: float) -> float:
    ordered = sorted(values)
    idx = max(0, math.ceil(q * len(ordered)) - 1)
    return ordered[idx]


def _distribution(values: list[float]) -> dict[str, Any]:
    if not values:
        return {"count": 0}
    return {
        "count": len(values),
        "p50": _percentile(values, 0.50),
        "p95": _percentile(values, 0.95),
        "max": max(values),
    }


def _census_apply(holders: dict[str, set[str]], r: dict[str, Any], want) -> None:
    """Fold one trace record into a guid -> live-holder-set census.

    `want` filters kb.put details (None admits every non-index fact); heal,
    policy replication and node loss apply to whatever the census tracks.
    """
    kind = r["kind"]
    detail = r["detail"]
    if kind == "kb.put":
        if detail.get("index"):
            return
        if want is not None and not want(detail):
            return
        holders[detail["guid"]] = set(detail["holders"])
    elif kind == "kb.heal" and detail["guid"] in holders:
        holders[detail["guid"]].update(detail["added"])
    elif kind == "kb.policy_replicate" and detail.get("ok") and detail.get("guid") in holders:
        holders[detail["guid"]].add(detail["target"])
    elif kind in ("node.crash", "node.leave"):
        for hs in holders.values():
            hs.discard(r["node"])


def parse_trace_jsonl(text: str) -> list[dict[str, Any]]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"trace line {lineno}: not valid JSON: {exc}") from None
        if not isinstance(rec, dict) or not {"t", "kind", "node", "detail"} <= set(rec):
            raise ScenarioError(f"trace line {lineno}: not a trace record")
        records.append(rec)
    return records


def stats(records: list[dict[str, Any]]) -> dict[str, Any]:
    counts: Counter[str] = Counter(r["kind"] for r in records)
    publish_t: dict[int, int] = {}
    for r in records:
        if r["kind"] == "pubsub.publish":
            publish_t[r["detail"]["event_id"]] = r["t"]
    deliver_latency = [
        r["detail"]["latency_ms"] for r in records if r["kind"] == "pubsub.deliver"
    ]
    match_latency = []
    for r in records:
        if r["kind"] != "match.emit":
            continue
        stamps = [publish_t[c] for c in r["detail"].get("contributors", []) if c in publish_t]
        if stamps:
            match_latency.append(r["t"] - max(stamps))
    fetch_hops = []
    fetch_sources: Counter[str] = Counter()
    for r in records:
        if r["kind"] == "overlay.fetch" and r["detail"].get("ok"):
            fetch_hops.append(r["detail"]["hops"])
            fetch_sources[r["detail"]["source"]] += 1
    drops: Counter[str] = Counter()
    for r in records:
        if r["kind"] == "pipe.drop":
            drops[r["detail"]["reason"]] += 1
        elif r["kind"] == "net.drop":
            drops["net"] += 1
    violations: dict[str, int] = {}
    open_since: dict[str, int] = {}
    last_t = records[-1]["t"] if records else 0
    for r in records:
        if r["kind"] == "evolve.violation":
            open_since.setdefault(r["detail"]["constraint"], r["t"])
        elif r["kind"] == "evolve.satisfied":
            desc = r["detail"]["constraint"]
            start = open_since.pop(desc, None)
            if start is not None:
                violations[desc] = violations.get(desc, 0) + (r["t"] - start)
    for desc, start in open_since.items():
        violations[desc] = violations.get(desc, 0) + (last_t - start)
    # fraction of stored facts with a live replica, sampled each sim second
    series: list[float] = []
    if records:
        holders: dict[str, set[str]] = {}
        idx = 0
        for sample_t in range(0, last_t + 1, 1000):
            while idx < len(records) and records[idx]["t"] <= sample_t:
                _census_apply(holders, records[idx], None)
                idx += 1
            if holders:
                live = sum(1 for hs in holders.values() if hs)
                series.append(round(live / len(holders), 6))
            else:
                series.append(1.0)
    return {
        "counts": dict(sorted(counts.items())),
        "events_published": len(publish_t),
        "delivery_latency_ms": _distribution(deliver_latency),
        "match_latency_ms": _distribution(match_latency),
        "fetch_hops": _distribution(fetch_hops),
        "fetch_sources": dict(sorted(fetch_sources.items())),
        "drops": dict(sorted(drops.items())),
        "violation_ms": dict(sorted(violations.items())),
        "replica_availability": {
            "sample_ms": 1000,
            "min": min(series) if series else 0.0,
            "series": series,
        },
    }


# -- assertions ---------------------------------------------------------------


def _where_matches(attributes: dict[str, Any], where: dict[str, Any]) -> bool:
    return all(attributes.get(k) == v for k, v in where.items())


def _assert_event_emitted(records: list[dict], a: dict) -> tuple[bool, str]:
    lo = a.get("not_before")
    hi = a.get("by")
    hits = []
    for r in records:
        if r["kind"] != "pubsub.publish" or r["detail"]["type"] != a["type"]:
            continue
        if a.get("node") is not None and r["node"] != a["node"]:
            continue
        if lo is not None and r["t"] < lo:
            continue
        if hi is not None and r["t"] > hi:
            continue
        if not _where_matches(r["detail"]["attributes"], a.get("where", {})):
            continue
        hits.append(r["t"])
    ok = len(hits) >= a["min_count"]
    window = f"[{lo if lo is not None else '..'}, {hi if hi is not None else '..'}]"
    return ok, f"{len(hits)} emission(s) of {a['type']} in {window} at t={hits}"


def _assert_no_event(records: list[dict], a: dict) -> tuple[bool, str]:
    lo = a.get("from")
    hi = a.get("before")
    hits = []
    for r in records:
        if r["kind"] != "pubsub.publish" or r["detail"]["type"] != a["type"]:
            continue
        if a.get("node") is not None and r["node"] != a["node"]:
            continue
        if lo is not None and r["t"] < lo:
            continue
        if hi is not None and r["t"] >= hi:
            continue
        if not _where_matches(r["detail"]["attributes"], a.get("where", {})):
            continue
        hits.append(r["t"])
    return not hits, f"{len(hits)} forbidden emission(s) of {a['type']} at t={hits}"


def _assert_replica_count_at(records: list[dict], a: dict) -> tuple[bool, str]:
    def want(detail: dict) -> bool:
        if detail.get("kind") != a["fact_kind"]:
            return False
        return "subject" not in a or detail.get("subject") == a["subject"]

    holders: dict[str, set[str]] = {}
    for r in records:
        if r["t"] > a["at"]:
            break
        _census_apply(holders, r, want)
    if not holders:
        return False, f"no facts of kind {a['fact_kind']!r} were stored"
    census = {g: len(hs) for g, hs in holders.items()}
    worst = min(census.values())
    return worst >= a["min"], f"minimum census {worst} across {len(census)} fact(s) at t={a['at']}"


def _assert_constraint_satisfied_by(records: list[dict], a: dict) -> tuple[bool, str]:
    last = None
    last_t = None
    for r in records:
        if r["t"] > a["by"]:
            break
        if r["kind"] in ("evolve.violation", "evolve.satisfied"):
            if r["detail"]["constraint"] == a["constraint"]:
                last = r["kind"]
                last_t = r["t"]
    if last is None:
        return True, "constraint never reported violated"
    ok = last == "evolve.satisfied"
    return ok, f"last transition {last} at t={last_t}"


def _assert_metric_bound(records: list[dict], a: dict) -> tuple[bool, str]:
    value: Any = stats(records)
    for part in a["metric"].split("."):
        if not isinstance(value, dict) or part not in value:
            return False, f"metric {a['metric']!r} not present in this trace"
        value = value[part]
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        return False, f"metric {a['metric']!r} is not numeric"
    if "max" in a and value > a["max"]:
        return False, f"{a['metric']} = {value} exceeds max {a['max']}"
    if "min" in a and value < a["min"]:
        return False, f"{a['metric']} = {value} below min {a['min']}"
    return True, f"{a['metric']} = {value}"


def assert_outcomes(
    records: list[dict[str, Any]], assertions: list[dict[str, Any]]
) -> list[dict[str, Any]]:
    evaluators = {
        "event_emitted": _assert_event_emitted,
        "no_event": _assert_no_event,
        "replica_count_at": _assert_replica_count_at,
        "constraint_satisfied_by": _assert_constraint_satisfied_by,
        "metric_bound": _assert_metric_bound,
    }
    results = []
    for a in assertions:
        ok, detail = evaluators[a["kind"]](records, a)
        summary_bits = {k: v for k, v in a.items() if k != "kind"}
        results.append(
            {
                "kind": a["kind"],
                "assertion": f"{a['kind']} {json.dumps(summary_bits, sort_keys=True)}",
                "ok": ok,
                "detail": detail,
            }
        )
    return results
