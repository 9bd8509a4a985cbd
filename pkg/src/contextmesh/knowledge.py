"""Replicated knowledge base on top of the overlay.

Facts are immutable attribute records addressed by content: a fact's guid is
the hash of its canonical serialization (kind, body, and subject when
present), so equal content always lands at the same identifier and a fetched
body can be verified by rehashing. Creation time is metadata, deliberately
outside the hash.

Two kinds of state break pure immutability, both replaced in place at fixed
guids and read only through the owner: per-kind indexes (at
guid_of("idx:" + kind)) listing member guids, and small registry items such
as the departed-node set. Everything else may be cached promiscuously; a
cache hit can change hop counts but never the bytes returned.

Healing is report-driven. Every node periodically tells each item's current
owner "I hold this guid"; the owner treats holders silent for 1.5 heal
periods as gone and re-replicates onto the next-closest eligible nodes until
the target count is met. Two optional policies piggyback on the same
machinery: a backup replica outside the origin region at put time, and a
latency-reduction replica placed into a region that keeps fetching a
subject's facts.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable

from .overlay import NotFoundError, Overlay, OverlayError, guid_of
from .pubsub import AttrValue, Geo, check_attr_value
from .simkernel import MS, Simulation

DEFAULT_REPLICA_K = 5
DEFAULT_T_HEAL_MS = 10_000
DEFAULT_CACHE_FRACTION = 0.25
DEFAULT_ACCESS_THRESHOLD = 3
DEFAULT_ACCESS_WINDOW_MS = 60_000

_STALE_FACTOR = 1.5


class KnowledgeError(Exception):
    pass


def body_to_jsonable(body: dict[str, AttrValue]) -> dict:
    out: dict[str, Any] = {}
    for name, value in body.items():
        if isinstance(value, Geo):
            out[name] = {"geo": [value.lat, value.lon]}
        else:
            out[name] = value
    return out


def body_from_jsonable(data: dict) -> dict[str, AttrValue]:
    out: dict[str, AttrValue] = {}
    for name, value in data.items():
        if isinstance(value, dict) and set(value) == {"geo"}:
            lat, lon = value["geo"]
            out[name] = Geo(float(lat), float(lon))
        else:
            out[name] = check_attr_value(value)
    return out


def canonical_fact_bytes(
    kind: str, body: dict[str, AttrValue], subject: str | None = None
) -> bytes:
    doc: dict[str, Any] = {"kind": kind, "body": body_to_jsonable(body)}
    if subject is not None:
        doc["subject"] = subject
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def fact_guid(kind: str, body: dict[str, AttrValue], subject: str | None = None) -> str:
    return guid_of(canonical_fact_bytes(kind, body, subject))


def kind_index_guid(kind: str) -> str:
    return guid_of(f"idx:{kind}".encode())


@dataclass
class Fact:
    kind: str
    body: dict[str, AttrValue]
    subject: str | None = None
    created_at: MS = 0

    def __post_init__(self):
        if not self.kind or not isinstance(self.kind, str):
            raise KnowledgeError(f"bad fact kind {self.kind!r}")
        for value in self.body.values():
            check_attr_value(value)

    @property
    def guid(self) -> str:
        return fact_guid(self.kind, self.body, self.subject)

    def to_bytes(self) -> bytes:
        return canonical_fact_bytes(self.kind, self.body, self.subject)

    @staticmethod
    def from_bytes(raw: bytes) -> "Fact":
        doc = json.loads(raw.decode())
        return Fact(
            kind=doc["kind"],
            body=body_from_jsonable(doc["body"]),
            subject=doc.get("subject"),
        )


@dataclass
class PutResult:
    guid: str
    holders: list[str]
    degraded: bool


class _LruCache:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: OrderedDict[str, bytes] = OrderedDict()

    def get(self, guid: str) -> bytes | None:
        body = self.entries.get(guid)
        if body is not None:
            self.entries.move_to_end(guid)
        return body

    def put(self, guid: str, body: bytes) -> None:
        if self.capacity <= 0:
            return
        if guid in self.entries:
            self.entries.move_to_end(guid)
            return
        self.entries[guid] = body
        while len(self.entries) > self.capacity:
            self.entries.popitem(last=False)


class KnowledgeBase:
    """Fact storage, indexes, caches, healing, and placement policies."""

    def __init__(
        self,
        sim: Simulation,
        overlay: Overlay,
        replica_k: int = DEFAULT_REPLICA_K,
        t_heal_ms: MS = DEFAULT_T_HEAL_MS,
        cache_enabled: bool = True,
        cache_fraction: float = DEFAULT_CACHE_FRACTION,
        backup_policy: bool = False,
        latency_policy: bool = False,
        access_threshold: int = DEFAULT_ACCESS_THRESHOLD,
        access_window_ms: MS = DEFAULT_ACCESS_WINDOW_MS,
    ):
        self.sim = sim
        self.overlay = overlay
        self.replica_k = replica_k
        self.t_heal_ms = t_heal_ms
        self.cache_enabled = cache_enabled
        self.cache_fraction = cache_fraction
        self.backup_policy = backup_policy
        self.latency_policy = latency_policy
        self.access_threshold = access_threshold
        self.access_window_ms = access_window_ms
        self.storage_nodes: set[str] = set()
        self._caches: dict[str, _LruCache] = {}
        self._kind_k: dict[str, int] = {}
        self._targets: dict[str, tuple[str, int]] = {}  # guid -> (kind, k)
        self._subject_guids: dict[str, list[str]] = {}
        self._access_log: dict[tuple[str, str], list[tuple[MS, str]]] = {}
        self._heal_started = False
        overlay.can_store = lambda name: name in self.storage_nodes
        overlay.cache_get = self._cache_get
        overlay.cache_put = self._cache_put
        sim.on_membership_change(self._on_membership)

    # -- storelet gating -----------------------------------------------------

    def enable_storage(self, node: str) -> None:
        self.storage_nodes.add(node)

    def disable_storage(self, node: str) -> None:
        self.storage_nodes.discard(node)

    # -- caches ----------------------------------------------------------------

    def _cache_for(self, node: str) -> _LruCache:
        cache = self._caches.get(node)
        if cache is None:
            slots = self.sim.node(node).storage_slots
            capacity = int(slots * self.cache_fraction) if self.cache_enabled else 0
            cache = self._caches[node] = _LruCache(capacity)
        return cache

    def _cache_get(self, node: str, guid: str) -> bytes | None:
        return self._cache_for(node).get(guid)

    def _cache_put(self, node: str, guid: str, body: bytes) -> None:
        self._cache_for(node).put(guid, body)

    def cache_contents(self, node: str) -> list[str]:
        return list(self._cache_for(node).entries)

    # -- facts -----------------------------------------------------------------

    def set_kind_replicas(self, kind: str, k: int) -> None:
        if k < 1:
            raise KnowledgeError(f"replica target must be >= 1, got {k}")
        self._kind_k[kind] = k

    def kind_replicas(self, kind: str) -> int:
        return self._kind_k.get(kind, self.replica_k)

    def retarget_kind(self, kind: str, k: int) -> None:
        """Change a kind's replica target, existing facts included.

        Healing picks up the new target on its next round.
        """
        self.set_kind_replicas(kind, k)
        for guid, (g_kind, _) in list(self._targets.items()):
            if g_kind == kind:
                self._targets[guid] = (kind, k)

    def put_fact(self, origin: str, fact: Fact, k: int | None = None) -> PutResult:
        """Store a fact with k replicas and add it to its kind index."""
        if k is None:
            k = self.kind_replicas(fact.kind)
        fact.created_at = self.sim.now
        raw = fact.to_bytes()
        guid = guid_of(raw)
        result = self.overlay.store(origin, raw, k)
        self._targets[guid] = (fact.kind, k)
        if fact.subject is not None:
            bucket = self._subject_guids.setdefault(fact.subject, [])
            if guid not in bucket:
                bucket.append(guid)
        self._index_add(origin, fact.kind, guid)
        self.sim.trace(
            "kb.put",
            origin,
            {
                "guid": guid,
                "kind": fact.kind,
                "subject": fact.subject,
                "holders": result.holders,
                "degraded": result.degraded,
            },
        )
        if self.backup_policy:
            self._apply_backup_policy(origin, guid, raw, result.holders)
        return PutResult(guid, result.holders, result.degraded)

    def get_fact(self, requester: str, guid: str) -> Fact:
        """Fetch and verify a fact; records the access for placement policy."""
        fetched = self.overlay.fetch(requester, guid)
        if guid_of(fetched.body) != guid:
            raise KnowledgeError(f"content verification failed for {guid}")
        fact = Fact.from_bytes(fetched.body)
        self.sim.trace(
            "kb.get",
            requester,
            {"guid": guid, "hops": fetched.hops, "source": fetched.source},
        )
        if fact.subject is not None:
            key = (fact.subject, self.sim.node(requester).region)
            self._access_log.setdefault(key, []).append((self.sim.now, guid))
        return fact

    def kind_members(self, requester: str, kind: str) -> list[str]:
        """Guids currently listed in a kind's index, sorted."""
        raw = self.read_registry_item(requester, kind_index_guid(kind))
        if raw is None:
            return []
        return list(json.loads(raw.decode())["members"])

    def _index_add(self, origin: str, kind: str, guid: str) -> None:
        index_guid = kind_index_guid(kind)
        raw = self.read_registry_item(origin, index_guid, trace=False)
        members: list[str] = [] if raw is None else json.loads(raw.decode())["members"]
        if guid not in members:
            members = sorted(members + [guid])
        body = json.dumps(
            {"kind": kind, "members": members}, sort_keys=True, separators=(",", ":")
        ).encode()
        self.write_registry_item(origin, index_guid, body, index_kind=kind)

    # -- fixed-guid registry items (the mutability exception) -------------------

    def read_registry_item(
        self, requester: str, guid: str, trace: bool = True
    ) -> bytes | None:
        """Owner-direct read: never cached, never served from stale path copies."""
        owner = self.overlay.owner_of(guid)
        hops = 0 if owner == requester else self.overlay.route(requester, guid).hops
        body = self.overlay.stores.get(owner, {}).get(guid)
        if body is None:
            entry = self.overlay.registry.get(owner, {}).get(guid, {})
            for holder in sorted(entry):
                if self.sim.alive(holder) and guid in self.overlay.stores.get(holder, {}):
                    body = self.overlay.stores[holder][guid]
                    hops += 1
                    break
        if trace:
            self.sim.trace(
                "kb.get",
                requester,
                {"guid": guid, "hops": hops, "source": "registry", "found": body is not None},
            )
        return body

    def write_registry_item(
        self, origin: str, guid: str, body: bytes, index_kind: str | None = None
    ) -> None:
        result = self.overlay.store(origin, body, self.replica_k, guid=guid)
        self.sim.trace(
            "kb.put",
            origin,
            {
                "guid": guid,
                "kind": index_kind,
                "subject": None,
                "holders": result.holders,
                "degraded": result.degraded,
                "index": True,
            },
        )

    # -- healing -----------------------------------------------------------------

    def start_heal(self) -> None:
        """Begin periodic i-hold reporting and owner-side repair on all nodes."""
        if self._heal_started:
            return
        self._heal_started = True
        for name in list(self.sim.nodes):
            self._arm_heal(name)

    def _on_membership(self, kind: str, name: str) -> None:
        if kind == "join" and self._heal_started:
            self._arm_heal(name)

    def _arm_heal(self, name: str) -> None:
        self.sim.register_handler(
            name, _IHold, lambda src, p, me=name: self._recv_ihold(me, src, p)
        )
        self.sim.every(self.t_heal_ms, lambda me=name: self.heal_tick(me), node=name)

    def _recv_ihold(self, me: str, src: str, payload: "_IHold") -> None:
        self.overlay.record_holder(me, payload.guid, src, self.sim.now)

    def heal_tick(self, node: str) -> None:
        """One heal round at one node: report what it holds, repair what it owns."""
        now = self.sim.now
        stale_ms = int(self.t_heal_ms * _STALE_FACTOR)
        for guid in sorted(self.overlay.stores.get(node, {})):
            owner = self.overlay.owner_of(guid)
            if owner == node:
                self.overlay.record_holder(node, guid, node, now)
            else:
                self.sim.send(node, owner, _IHold(guid))
        owned = self.overlay.registry.get(node, {})
        for guid in sorted(owned):
            if self.overlay.owner_of(guid) != node:
                continue
            entry = owned[guid]
            confirmed = sorted(
                h
                for h, t in entry.items()
                if now - t <= stale_ms and self.sim.alive(h)
            )
            for h in list(entry):
                if h not in confirmed:
                    del entry[h]
            target = self._targets.get(guid, (None, self.replica_k))[1]
            if len(confirmed) >= target:
                continue
            body = self.overlay.stores.get(node, {}).get(guid)
            if body is None:
                for h in confirmed:
                    body = self.overlay.stores.get(h, {}).get(guid)
                    if body is not None:
                        break
            if body is None:
                continue
            added = []
            for candidate in self.overlay.ranked_storable(guid):
                if len(confirmed) + len(added) >= target:
                    break
                if candidate in confirmed or candidate in added:
                    continue
                self.overlay.replicate_to(guid, body, candidate)
                added.append(candidate)
            if added:
                self.sim.trace(
                    "kb.heal",
                    node,
                    {"guid": guid, "added": added, "confirmed": confirmed},
                )

    # -- placement policies ---------------------------------------------------------

    def _apply_backup_policy(
        self, origin: str, guid: str, body: bytes, holders: list[str]
    ) -> None:
        origin_region = self.sim.node(origin).region
        if any(self.sim.node(h).region != origin_region for h in holders):
            return
        candidates = [
            n
            for n in self.overlay.ranked_storable(guid)
            if self.sim.node(n).region != origin_region and n not in holders
        ]
        if not candidates:
            self.sim.trace(
                "kb.policy_replicate",
                origin,
                {"guid": guid, "policy": "backup", "ok": False},
            )
            return
        self.overlay.replicate_to(guid, body, candidates[0])
        self.sim.trace(
            "kb.policy_replicate",
            origin,
            {"guid": guid, "policy": "backup", "ok": True, "target": candidates[0]},
        )

    def start_policy_monitor(self, period_ms: MS | None = None) -> None:
        if not self.latency_policy:
            return
        self.sim.every(period_ms or self.t_heal_ms, self.access_monitor_tick)

    def access_monitor_tick(self) -> None:
        """Replicate a subject's recently hot facts into the accessing region."""
        now = self.sim.now
        horizon = now - self.access_window_ms
        for key in sorted(self._access_log):
            subject, region = key
            log = [(t, g) for t, g in self._access_log[key] if t >= horizon]
            self._access_log[key] = log
            if len(log) < self.access_threshold:
                continue
            guids = self._subject_guids.get(subject, [])
            present = any(
                g in self.overlay.stores.get(n, {})
                for n in self.sim.live_nodes()
                if self.sim.node(n).region == region
                for g in guids
            )
            if present:
                continue
            accessed = sorted({g for _, g in log})
            for guid in accessed:
                self._place_in_region(subject, region, guid)

    def _place_in_region(self, subject: str, region: str, guid: str) -> None:
        candidates = sorted(
            (
                n
                for n in self.sim.live_nodes()
                if self.sim.node(n).region == region
                and self.overlay.can_store(n)
                and self.overlay._has_capacity(n, guid)
            ),
            key=lambda n: (len(self.overlay.stores.get(n, {})), n),
        )
        body = None
        for holder in self.overlay.live_holders(guid):
            body = self.overlay.stores[holder].get(guid)
            if body is not None:
                break
        if not candidates or body is None:
            self.sim.trace(
                "kb.policy_replicate",
                "",
                {"guid": guid, "policy": "latency", "region": region, "ok": False},
            )
            return
        target = candidates[0]
        self.overlay.replicate_to(guid, body, target)
        self.sim.trace(
            "kb.policy_replicate",
            target,
            {
                "guid": guid,
                "policy": "latency",
                "region": region,
                "subject": subject,
                "ok": True,
                "target": target,
            },
        )


@dataclass
class _IHold:
    guid: str
