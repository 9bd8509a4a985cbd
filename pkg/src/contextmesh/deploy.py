"""Component deployment, liveness monitoring, and constraint-driven evolution.

Infrastructure install is phase one: it puts the runtime on a node, starts
its heartbeat and failure monitor, and announces the node with a resource
event. Phase two ships component bundles; a bundle is accepted only after
every check passes (infrastructure present, checksum, slots, known type,
allow-list), so a rejected deployment leaves no partial state behind.

Every installed node heartbeats every installed peer. A peer silent for
longer than T_fail is claimed against a shared departed set stored in the
overlay; the set's owner serializes claims so exactly one monitor wins and
publishes the node-departed event. Voluntary departures announce themselves
on the way out, which suppresses the failure path.

Evolution engines subscribe to the resource events of their region and
re-evaluate their constraints on every change, planning deployments,
replication changes, or relocations to restore them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable

from .knowledge import KnowledgeBase
from .overlay import guid_of
from .pubsub import Constraint, Event, EventFabric, Subscription
from .simkernel import MS, Simulation

DEFAULT_T_HB_MS = 2_000
FAIL_MULTIPLE = 3

DEPARTED_SET_GUID = guid_of(b"sys:departed-set")

RESOURCE_EVENT_TYPES = ("node-arrival", "node-withdrawal", "node-departed")


class DeployError(Exception):
    pass


@dataclass(frozen=True)
class Bundle:
    """Shippable component definition. ``checksum`` covers the payload bytes."""

    bundle_id: str
    component_type: str
    payload: bytes
    checksum: str
    required_compute: int = 1
    required_storage: int = 0

    @staticmethod
    def create(
        bundle_id: str,
        component_type: str,
        definition: dict[str, Any],
        required_compute: int = 1,
        required_storage: int = 0,
    ) -> "Bundle":
        payload = json.dumps(definition, sort_keys=True, separators=(",", ":")).encode()
        return Bundle(
            bundle_id=bundle_id,
            component_type=component_type,
            payload=payload,
            checksum=guid_of(payload),
            required_compute=required_compute,
            required_storage=required_storage,
        )

    def definition(self) -> dict[str, Any]:
        return json.loads(self.payload.decode())


def bundle_to_bytes(bundle: Bundle) -> bytes:
    """Serialize for directory storage; the checksum travels with the bundle."""
    return json.dumps(
        {
            "bundle_id": bundle.bundle_id,
            "component_type": bundle.component_type,
            "definition": bundle.definition(),
            "checksum": bundle.checksum,
            "required_compute": bundle.required_compute,
            "required_storage": bundle.required_storage,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()


def bundle_from_bytes(raw: bytes) -> Bundle:
    """Rebuild a bundle; the carried checksum is verified at deploy time, so
    a definition tampered with in storage fails the checksum then."""
    data = json.loads(raw.decode())
    payload = json.dumps(data["definition"], sort_keys=True, separators=(",", ":")).encode()
    return Bundle(
        bundle_id=data["bundle_id"],
        component_type=data["component_type"],
        payload=payload,
        checksum=data["checksum"],
        required_compute=data["required_compute"],
        required_storage=data["required_storage"],
    )


@dataclass
class ComponentRecord:
    component_id: str
    component_type: str
    node: str
    bundle: Bundle


@dataclass
class _Heartbeat:
    pass


@dataclass
class _DepartClaim:
    target: str


@dataclass
class _ClaimGranted:
    target: str


Instantiator = Callable[[str, dict[str, Any]], str]
Deinstantiator = Callable[[str, str], None]


class DeployInfra:
    def __init__(
        self,
        sim: Simulation,
        fabric: EventFabric,
        kb: KnowledgeBase,
        t_hb_ms: MS = DEFAULT_T_HB_MS,
    ):
        self.sim = sim
        self.fabric = fabric
        self.kb = kb
        self.t_hb_ms = t_hb_ms
        self.t_fail_ms = FAIL_MULTIPLE * t_hb_ms
        self.installed: set[str] = set()
        self.components: dict[str, ComponentRecord] = {}
        self.allow_types: dict[str, set[str] | None] = {}
        self._instantiators: dict[str, Instantiator] = {}
        self._deinstantiators: dict[str, Deinstantiator] = {}
        self._last_hb: dict[str, dict[str, MS]] = {}
        self._resolved: dict[str, set[str]] = {}  # peers a monitor no longer tracks
        self._claimed: dict[str, set[str]] = {}

    def register_component_type(
        self,
        component_type: str,
        instantiate: Instantiator,
        deinstantiate: Deinstantiator | None = None,
    ) -> None:
        self._instantiators[component_type] = instantiate
        if deinstantiate is not None:
            self._deinstantiators[component_type] = deinstantiate

    def set_allowed_types(self, node: str, types: set[str] | None) -> None:
        self.allow_types[node] = types

    # -- phase one: infrastructure ---------------------------------------------

    def install_infrastructure(self, node: str) -> None:
        profile = self.sim.node(node)
        if not profile.alive:
            raise DeployError(f"{node}: cannot install on a dead node")
        if node in self.installed:
            raise DeployError(f"{node}: infrastructure already installed")
        self.installed.add(node)
        self._last_hb[node] = {}
        self._resolved[node] = set()
        self._claimed[node] = set()
        self.sim.register_handler(
            node, _Heartbeat, lambda src, p, me=node: self._on_heartbeat(me, src)
        )
        self.sim.register_handler(
            node, _DepartClaim, lambda src, p, me=node: self._on_claim(me, src, p)
        )
        self.sim.register_handler(
            node, _ClaimGranted, lambda src, p, me=node: self._on_granted(me, p)
        )
        self.sim.on_withdrawal(node, lambda me=node: self._announce_withdrawal(me))
        self.fabric.subscribe(
            node,
            Subscription("node-withdrawal"),
            sink="monitor",
            callback=lambda e, me=node: self._stop_tracking(me, e),
        )
        self.fabric.subscribe(
            node,
            Subscription("node-departed"),
            sink="monitor",
            callback=lambda e, me=node: self._stop_tracking(me, e),
        )
        self._beat(node)
        self.sim.every(self.t_hb_ms, lambda me=node: self._beat(me), node=node)
        self.sim.every(self.t_hb_ms, lambda me=node: self._monitor_tick(me), node=node)
        self.sim.trace("deploy.install", node, {"node": node})
        self._publish_resource_event(node, "node-arrival", node)

    def _publish_resource_event(self, publisher: str, type_name: str, about: str) -> None:
        profile = self.sim.node(about)
        event = self.fabric.make_event(
            type_name,
            {
                "node": about,
                "region": profile.region,
                "lat": profile.lat,
                "lon": profile.lon,
            },
            timestamp=self.sim.now,
            source=publisher,
        )
        self.fabric.publish(publisher, event)

    def _announce_withdrawal(self, node: str) -> None:
        # Runs just before a graceful leave takes effect; the node is still
        # alive, so it can say goodbye itself.
        self._publish_resource_event(node, "node-withdrawal", node)

    # -- heartbeats and failure detection --------------------------------------

    def _beat(self, node: str) -> None:
        for peer in sorted(self.installed):
            if peer != node and self.sim.alive(peer):
                self.sim.send(node, peer, _Heartbeat())

    def _on_heartbeat(self, me: str, src: str) -> None:
        if src in self._resolved[me]:
            return
        self._last_hb[me][src] = self.sim.now

    def _stop_tracking(self, me: str, event: Event) -> None:
        target = event.attributes.get("node")
        if isinstance(target, str):
            self._resolved[me].add(target)
            self._last_hb[me].pop(target, None)

    def _monitor_tick(self, me: str) -> None:
        now = self.sim.now
        for peer in sorted(self._last_hb[me]):
            last = self._last_hb[me][peer]
            if now - last <= self.t_fail_ms or peer in self._claimed[me]:
                continue
            self._claimed[me].add(peer)
            owner = self.kb.overlay.owner_of(DEPARTED_SET_GUID)
            if owner == me:
                self._grant_if_first(me, me, peer)
            else:
                self.sim.send(me, owner, _DepartClaim(peer))

    def _on_claim(self, me: str, src: str, claim: _DepartClaim) -> None:
        self._grant_if_first(me, src, claim.target)

    def _grant_if_first(self, owner: str, claimant: str, target: str) -> None:
        raw = self.kb.read_registry_item(owner, DEPARTED_SET_GUID, trace=False)
        departed: list[str] = json.loads(raw.decode()) if raw else []
        if target in departed:
            return
        departed.append(target)
        departed.sort()
        self.kb.write_registry_item(
            owner, DEPARTED_SET_GUID, json.dumps(departed, separators=(",", ":")).encode()
        )
        if claimant == owner:
            self._on_granted(owner, _ClaimGranted(target))
        else:
            self.sim.send(owner, claimant, _ClaimGranted(target))

    def _on_granted(self, me: str, granted: _ClaimGranted) -> None:
        if not self.sim.alive(me):
            return
        self.sim.trace("monitor.departed", me, {"node": granted.target})
        self._publish_resource_event(me, "node-departed", granted.target)

    # -- phase two: bundles ------------------------------------------------------

    def deploy_bundle(self, node: str, bundle: Bundle) -> str:
        reason = self._check_bundle(node, bundle)
        if reason is not None:
            self.sim.trace(
                "deploy.reject",
                node,
                {"bundle": bundle.bundle_id, "node": node, "reason": reason},
            )
            raise DeployError(f"{bundle.bundle_id} on {node}: {reason}")
        definition = json.loads(bundle.payload.decode())
        component_id = self._instantiators[bundle.component_type](node, definition)
        self.components[component_id] = ComponentRecord(
            component_id, bundle.component_type, node, bundle
        )
        self.sim.trace(
            "deploy.accept",
            node,
            {
                "bundle": bundle.bundle_id,
                "component": component_id,
                "type": bundle.component_type,
                "node": node,
            },
        )
        return component_id

    def _check_bundle(self, node: str, bundle: Bundle) -> str | None:
        if node not in self.installed:
            return "no_infrastructure"
        if not self.sim.alive(node):
            return "dead_node"
        if guid_of(bundle.payload) != bundle.checksum:
            return "checksum_mismatch"
        try:
            definition = json.loads(bundle.payload.decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            return "payload_invalid"
        if not isinstance(definition, dict) or "id" not in definition:
            return "payload_invalid"
        if definition["id"] in self.components:
            return "duplicate_component"
        if bundle.component_type not in self._instantiators:
            return "unknown_type"
        allowed = self.allow_types.get(node)
        if allowed is not None and bundle.component_type not in allowed:
            return "type_not_allowed"
        if self.free_compute(node) < bundle.required_compute:
            return "insufficient_compute"
        if self.free_storage(node) < bundle.required_storage:
            return "insufficient_storage"
        return None

    def undeploy(self, component_id: str) -> None:
        record = self.components.pop(component_id, None)
        if record is None:
            raise DeployError(f"unknown component {component_id!r}")
        off = self._deinstantiators.get(record.component_type)
        if off is not None:
            off(record.node, component_id)
        self.sim.trace(
            "deploy.remove",
            record.node,
            {"component": component_id, "type": record.component_type},
        )

    # -- bookkeeping ------------------------------------------------------------

    def free_compute(self, node: str) -> int:
        used = sum(
            r.bundle.required_compute for r in self.components.values() if r.node == node
        )
        return self.sim.node(node).compute_slots - used

    def free_storage(self, node: str) -> int:
        used = sum(
            r.bundle.required_storage for r in self.components.values() if r.node == node
        )
        return self.sim.node(node).storage_slots - used

    def live_instances(self, component_type: str, region: str | None = None) -> list[str]:
        out = []
        for cid in sorted(self.components):
            r = self.components[cid]
            if r.component_type != component_type or not self.sim.alive(r.node):
                continue
            if region is not None and self.sim.node(r.node).region != region:
                continue
            out.append(cid)
        return out

    def component_load(self, node: str) -> int:
        return sum(1 for r in self.components.values() if r.node == node)


# -- constraints ------------------------------------------------------------


@dataclass(frozen=True)
class MinInstances:
    component_type: str
    region: str
    n: int

    def describe(self) -> str:
        return f"min_instances({self.component_type},{self.region},{self.n})"


@dataclass(frozen=True)
class ReplicaCount:
    fact_kind: str
    k: int

    def describe(self) -> str:
        return f"replica_count({self.fact_kind},{self.k})"


@dataclass(frozen=True)
class MaxLatency:
    src_type: str
    dst_type: str
    ms: int

    def describe(self) -> str:
        return f"max_latency({self.src_type},{self.dst_type},{self.ms})"


EvolutionConstraint = MinInstances | ReplicaCount | MaxLatency


class EvolutionEngine:
    """One per region, hosted on its lexicographically lowest installed node."""

    def __init__(
        self,
        sim: Simulation,
        deploy: DeployInfra,
        kb: KnowledgeBase,
        fabric: EventFabric,
        region: str,
        node: str,
        constraints: list[EvolutionConstraint],
        bundles: list[Bundle],
    ):
        self.sim = sim
        self.deploy = deploy
        self.kb = kb
        self.region = region
        self.node = node
        self.constraints = list(constraints)
        self.bundles = list(bundles)
        self._violated: set[str] = set()
        self._clone_seq = 0
        for type_name in RESOURCE_EVENT_TYPES:
            fabric.subscribe(
                node,
                Subscription(type_name, (Constraint("region", "eq", region),)),
                sink="evolution",
                callback=lambda e: self.evaluate(),
            )

    def evaluate(self) -> None:
        if not self.sim.alive(self.node):
            return
        for c in self.constraints:
            if isinstance(c, MinInstances):
                self._eval_min_instances(c)
            elif isinstance(c, ReplicaCount):
                self._eval_replica_count(c)
            elif isinstance(c, MaxLatency):
                self._eval_max_latency(c)

    def _mark(self, c: EvolutionConstraint, ok: bool, detail: dict[str, Any]) -> None:
        desc = c.describe()
        if ok and desc in self._violated:
            self._violated.discard(desc)
            self.sim.trace("evolve.satisfied", self.node, {"constraint": desc, **detail})
        elif not ok and desc not in self._violated:
            self._violated.add(desc)
            self.sim.trace("evolve.violation", self.node, {"constraint": desc, **detail})

    def _template_for(self, component_type: str) -> Bundle | None:
        for b in self.bundles:
            if b.component_type == component_type:
                return b
        return None

    def _clone(self, template: Bundle, new_id: str) -> Bundle:
        definition = template.definition()
        definition["id"] = new_id
        return Bundle.create(
            bundle_id=f"{template.bundle_id}+{new_id}",
            component_type=template.component_type,
            definition=definition,
            required_compute=template.required_compute,
            required_storage=template.required_storage,
        )

    def _candidates(self, bundle: Bundle) -> list[str]:
        nodes = []
        for name in self.deploy.installed:
            if not self.sim.alive(name):
                continue
            if self.sim.node(name).region != self.region:
                continue
            allowed = self.deploy.allow_types.get(name)
            if allowed is not None and bundle.component_type not in allowed:
                continue
            if self.deploy.free_compute(name) < bundle.required_compute:
                continue
            if self.deploy.free_storage(name) < bundle.required_storage:
                continue
            nodes.append(name)
        return sorted(nodes, key=lambda n: (self.deploy.component_load(n), n))

    def _eval_min_instances(self, c: MinInstances) -> None:
        count = len(self.deploy.live_instances(c.component_type, c.region))
        self._mark(c, count >= c.n, {"count": count})
        if count >= c.n:
            return
        template = self._template_for(c.component_type)
        if template is None:
            self.sim.trace(
                "evolve.infeasible",
                self.node,
                {"constraint": c.describe(), "reason": "no_bundle", "unplaced": c.n - count},
            )
            return
        actions = []
        while count < c.n:
            candidates = self._candidates(template)
            placed = False
            for target in candidates:
                self._clone_seq += 1
                clone = self._clone(
                    template, f"{c.component_type}.{target}.{self._clone_seq}"
                )
                try:
                    cid = self.deploy.deploy_bundle(target, clone)
                except DeployError:
                    continue
                actions.append({"action": "deploy", "node": target, "component": cid})
                count += 1
                placed = True
                break
            if not placed:
                self.sim.trace(
                    "evolve.infeasible",
                    self.node,
                    {
                        "constraint": c.describe(),
                        "reason": "no_candidates",
                        "unplaced": c.n - count,
                    },
                )
                break
        if actions:
            self.sim.trace(
                "evolve.plan", self.node, {"constraint": c.describe(), "actions": actions}
            )
            self._mark(c, count >= c.n, {"count": count})

    def _eval_replica_count(self, c: ReplicaCount) -> None:
        current = self.kb.kind_replicas(c.fact_kind)
        self._mark(c, current >= c.k, {"k": current})
        if current >= c.k:
            return
        self.kb.retarget_kind(c.fact_kind, c.k)
        self.sim.trace(
            "evolve.plan",
            self.node,
            {
                "constraint": c.describe(),
                "actions": [{"action": "retarget", "kind": c.fact_kind, "k": c.k}],
            },
        )
        self._mark(c, True, {"k": c.k})

    def _eval_max_latency(self, c: MaxLatency) -> None:
        sources = self.deploy.live_instances(c.src_type, self.region)
        sinks = self.deploy.live_instances(c.dst_type, self.region)
        if not sources or not sinks:
            self._mark(c, True, {})
            return
        src_nodes = sorted({self.deploy.components[s].node for s in sources})

        def worst(node: str) -> int:
            return max(self.sim.latency(s, node) for s in src_nodes)

        violating = [d for d in sinks if worst(self.deploy.components[d].node) > c.ms]
        self._mark(c, not violating, {"violating": len(violating)})
        if not violating:
            return
        actions = []
        for cid in violating:
            record = self.deploy.components[cid]
            candidates = [n for n in self._candidates(record.bundle) if worst(n) <= c.ms]
            if not candidates:
                self.sim.trace(
                    "evolve.infeasible",
                    self.node,
                    {"constraint": c.describe(), "reason": "no_candidates", "component": cid},
                )
                continue
            target = candidates[0]
            self.deploy.undeploy(cid)
            try:
                new_id = self.deploy.deploy_bundle(target, record.bundle)
            except DeployError:
                self.sim.trace(
                    "evolve.infeasible",
                    self.node,
                    {"constraint": c.describe(), "reason": "deploy_failed", "component": cid},
                )
                continue
            actions.append(
                {"action": "relocate", "component": new_id, "from": record.node, "node": target}
            )
        if actions:
            self.sim.trace(
                "evolve.plan", self.node, {"constraint": c.describe(), "actions": actions}
            )
            sinks = self.deploy.live_instances(c.dst_type, self.region)
            still = [d for d in sinks if worst(self.deploy.components[d].node) > c.ms]
            self._mark(c, not still, {"violating": len(still)})
