"""Prefix-routed overlay for content-addressed storage.

Identifiers are 128-bit GUIDs rendered as 32 lowercase hex digits, taken from
the first 128 bits of SHA-256. Node identifiers live in the same space, so any
key has a well-defined owner: the live node sharing the longest hex-digit
prefix with it, ties broken by minimal absolute numeric distance and then by
lowest identifier.

Routing walks the classic prefix-descent: each node keeps a 32-row, 16-column
table (row r, column c holds some live node sharing r leading digits whose
next digit is c) plus a neighbor set of the 8 numerically closest nodes. Each
table hop strictly extends the shared prefix with the key, which bounds any
route at 32 hops. When no deeper entry exists the current node resolves the
owner among the nodes tied at maximal prefix using the membership view that
synchronous repair maintains anyway; that final selection costs at most one
more hop.

Repair is immediate: every join, crash, or leave rebuilds tables, neighbor
sets, and the membership view in the same simulated instant.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable

from .simkernel import MS, DeadNodeError, Simulation

GUID_DIGITS = 32
TABLE_ROWS = 32
TABLE_COLS = 16
NEIGHBOR_SET_SIZE = 8

_GUID_RE = re.compile(r"[0-9a-f]{32}")


class OverlayError(Exception):
    pass


class NotFoundError(OverlayError):
    pass


def guid_of(content: bytes) -> str:
    """First 128 bits of SHA-256 as 32 lowercase hex digits."""
    if not isinstance(content, (bytes, bytearray)):
        raise OverlayError(f"guid_of takes bytes, got {type(content).__name__}")
    return hashlib.sha256(bytes(content)).hexdigest()[:GUID_DIGITS]


def check_guid(guid: str) -> str:
    if not isinstance(guid, str) or not _GUID_RE.fullmatch(guid):
        raise OverlayError(f"not a guid: {guid!r}")
    return guid


def node_id_for(name: str) -> str:
    """Derive a node's overlay identifier from its scenario name."""
    return guid_of(f"node:{name}".encode())


def shared_prefix_len(a_int: int, b_int: int) -> int:
    x = a_int ^ b_int
    if x == 0:
        return GUID_DIGITS
    return (128 - x.bit_length()) // 4


def digit_at(value_int: int, position: int) -> int:
    return (value_int >> (4 * (GUID_DIGITS - 1 - position))) & 0xF


@dataclass
class RoutingState:
    """One node's routing view: prefix table plus numeric neighbors."""

    table: list[list[str | None]]
    neighbor_set: list[str]


@dataclass
class RouteResult:
    owner: str
    hops: int
    path: list[str]


@dataclass
class StoreResult:
    guid: str
    holders: list[str]
    degraded: bool


@dataclass
class FetchResult:
    body: bytes
    hops: int
    source: str
    served_by: str


class Overlay:
    """Routing state, replica stores, and the owner-side holder registry."""

    def __init__(self, sim: Simulation):
        self.sim = sim
        self.states: dict[str, RoutingState] = {}
        self.stores: dict[str, dict[str, bytes]] = {}
        # owner name -> guid -> holder name -> last confirmation time
        self.registry: dict[str, dict[str, dict[str, MS]]] = {}
        self.versions: dict[str, int] = {}
        self.on_path_caching = False
        # Hooks the knowledge layer installs; defaults make the overlay
        # usable standalone.
        self.can_store: Callable[[str], bool] = lambda name: True
        self.cache_get: Callable[[str, str], bytes | None] = lambda n, g: None
        self.cache_put: Callable[[str, str, bytes], None] = lambda n, g, b: None
        self._ints: dict[str, int] = {}
        self._rebuild()
        sim.on_membership_change(self._on_membership)

    # -- membership and repair -------------------------------------------

    def join(self, profile) -> None:
        self.sim.add_node(profile)

    def depart(self, name: str) -> None:
        self.sim.leave(name)

    def _on_membership(self, kind: str, name: str) -> None:
        self._rebuild()
        self.sim.trace("overlay.repair", name, {"change": kind})

    def _int_id(self, name: str) -> int:
        cached = self._ints.get(name)
        if cached is None:
            cached = int(check_guid(self.sim.node(name).node_id), 16)
            self._ints[name] = cached
        return cached

    def _rebuild(self) -> None:
        live = self.sim.live_nodes()
        by_id = sorted(live, key=self._int_id)
        for name in live:
            self.stores.setdefault(name, {})
            self.registry.setdefault(name, {})
            me = self._int_id(name)
            table: list[list[str | None]] = [
                [None] * TABLE_COLS for _ in range(TABLE_ROWS)
            ]
            for other in by_id:
                if other == name:
                    continue
                oid = self._int_id(other)
                p = shared_prefix_len(me, oid)
                if p >= TABLE_ROWS:
                    continue
                c = digit_at(oid, p)
                if table[p][c] is None:
                    table[p][c] = other
            neighbors = sorted(
                (o for o in live if o != name),
                key=lambda o: (abs(self._int_id(o) - me), self.sim.node(o).node_id),
            )[:NEIGHBOR_SET_SIZE]
            self.states[name] = RoutingState(table, neighbors)

    # -- ownership ---------------------------------------------------------

    def owner_rank_key(self, key_int: int):
        def rank(name: str):
            nid = self._int_id(name)
            return (
                -shared_prefix_len(nid, key_int),
                abs(nid - key_int),
                self.sim.node(name).node_id,
            )

        return rank

    def owner_of(self, guid: str) -> str:
        live = self.sim.live_nodes()
        if not live:
            raise OverlayError("no live nodes")
        key_int = int(check_guid(guid), 16)
        return min(live, key=self.owner_rank_key(key_int))

    def ranked_storable(self, guid: str) -> list[str]:
        """Live nodes able to take a replica, best placement first."""
        key_int = int(check_guid(guid), 16)
        eligible = [
            n
            for n in self.sim.live_nodes()
            if self.can_store(n) and self._has_capacity(n, guid)
        ]
        return sorted(eligible, key=self.owner_rank_key(key_int))

    def _has_capacity(self, name: str, guid: str) -> bool:
        store = self.stores.setdefault(name, {})
        return guid in store or len(store) < self.sim.node(name).storage_slots

    # -- routing -----------------------------------------------------------

    def route(self, start: str, key: str) -> RouteResult:
        """Walk from `start` to the owner of `key`, counting hops."""
        if not self.sim.alive(start):
            raise DeadNodeError(f"route from dead node {start!r}")
        key_int = int(check_guid(key), 16)
        current = start
        path = [start]
        while True:
            p = shared_prefix_len(self._int_id(current), key_int)
            if p >= GUID_DIGITS:
                break
            cell = self.states[current].table[p][digit_at(key_int, p)]
            if cell is not None and self.sim.alive(cell):
                current = cell
                path.append(current)
                continue
            owner = self.owner_of(key)
            if owner != current:
                current = owner
                path.append(current)
            break
        return RouteResult(current, len(path) - 1, path)

    # -- storage -------------------------------------------------------------

    def store(
        self, origin: str, body: bytes, k: int, guid: str | None = None
    ) -> StoreResult:
        """Place k replicas of `body`; its guid is guid_of(body) unless an
        explicit guid is given (the mutable-registry exception used by kind
        indexes, which are replaced in place at a fixed identifier)."""
        if not self.sim.alive(origin):
            raise DeadNodeError(f"store from dead node {origin!r}")
        if k < 1:
            raise OverlayError(f"replica count must be >= 1, got {k}")
        content_guid = guid_of(body)
        if guid is None:
            guid = content_guid
        else:
            check_guid(guid)
        ranked = self.ranked_storable(guid)
        holders = ranked[:k]
        if not holders:
            raise OverlayError("no storage-capable live node")
        degraded = len(holders) < k
        for h in holders:
            self.stores[h][guid] = body
        owner = self.owner_of(guid)
        now = self.sim.now
        entry = self.registry.setdefault(owner, {}).setdefault(guid, {})
        for h in holders:
            entry[h] = now
        self.versions[guid] = self.versions.get(guid, 0) + 1
        self.sim.trace(
            "overlay.store",
            origin,
            {
                "guid": guid,
                "holders": holders,
                "degraded": degraded,
                "version": self.versions[guid],
                "content_addressed": guid == content_guid,
            },
        )
        return StoreResult(guid, holders, degraded)

    def replicate_to(self, guid: str, body: bytes, target: str) -> None:
        """Place one additional replica and record it at the current owner."""
        if not self.sim.alive(target):
            raise DeadNodeError(f"replicate to dead node {target!r}")
        self.stores[target][guid] = body
        owner = self.owner_of(guid)
        self.registry.setdefault(owner, {}).setdefault(guid, {})[target] = self.sim.now
        self.versions.setdefault(guid, 1)

    def record_holder(self, owner: str, guid: str, holder: str, t: MS) -> None:
        self.registry.setdefault(owner, {}).setdefault(guid, {})[holder] = t

    def live_holders(self, guid: str) -> list[str]:
        """Census over actual replica stores; used by tests and policy checks."""
        return sorted(
            n for n, items in self.stores.items() if guid in items and self.sim.alive(n)
        )

    # -- retrieval -----------------------------------------------------------

    def fetch(self, requester: str, guid: str) -> FetchResult:
        """Fetch by guid: requester cache, then the route path, then the
        owner's holder registry as a last redirect."""
        if not self.sim.alive(requester):
            raise DeadNodeError(f"fetch from dead node {requester!r}")
        check_guid(guid)
        body = self.cache_get(requester, guid)
        if body is not None:
            return self._fetched(requester, guid, body, 0, "cache", requester)
        route = self.route(requester, guid)
        hops = 0
        path_tail: list[str] = []
        for node in route.path:
            if node != requester:
                hops += 1
                path_tail.append(node)
            held = self.stores.get(node, {}).get(guid)
            if held is not None:
                return self._served(requester, guid, held, hops, "store", node, path_tail)
            cached = self.cache_get(node, guid)
            if cached is not None and node != requester:
                return self._served(requester, guid, cached, hops, "cache", node, path_tail)
        entry = self.registry.get(route.owner, {}).get(guid, {})
        for holder in sorted(entry, key=self.owner_rank_key(int(guid, 16))):
            if self.sim.alive(holder) and guid in self.stores.get(holder, {}):
                hops += 1
                return self._served(
                    requester, guid, self.stores[holder][guid], hops, "store", holder, path_tail
                )
        self.sim.trace(
            "overlay.fetch", requester, {"guid": guid, "ok": False, "hops": hops}
        )
        raise NotFoundError(f"no live copy of {guid}")

    def _served(
        self,
        requester: str,
        guid: str,
        body: bytes,
        hops: int,
        source: str,
        served_by: str,
        path_tail: list[str],
    ) -> FetchResult:
        self.cache_put(requester, guid, body)
        if self.on_path_caching:
            for node in path_tail:
                if node != served_by:
                    self.cache_put(node, guid, body)
        return self._fetched(requester, guid, body, hops, source, served_by)

    def _fetched(
        self, requester: str, guid: str, body: bytes, hops: int, source: str, by: str
    ) -> FetchResult:
        self.sim.trace(
            "overlay.fetch",
            requester,
            {"guid": guid, "ok": True, "hops": hops, "source": source, "served_by": by},
        )
        return FetchResult(body, hops, source, by)
