"""Shared builders for the test suite.

Most tests want a small simulation with a handful of nodes and the overlay
already assembled; these helpers keep that boilerplate in one place.
"""

from __future__ import annotations

import pytest

from contextmesh.knowledge import KnowledgeBase
from contextmesh.overlay import Overlay, node_id_for
from contextmesh.pubsub import EventFabric
from contextmesh.simkernel import NodeProfile, Simulation


def profile(name: str, region: str, **kwargs) -> NodeProfile:
    return NodeProfile(name=name, node_id=node_id_for(name), region=region, **kwargs)


def make_sim(spec: list[tuple[str, str]], seed: int = 0, **node_kwargs) -> Simulation:
    """Build a Simulation from (name, region) pairs."""
    sim = Simulation(seed=seed)
    for name, region in spec:
        sim.add_node(profile(name, region, **node_kwargs))
    return sim


def flat_spec(n: int, region: str = "fife", prefix: str = "n") -> list[tuple[str, str]]:
    return [(f"{prefix}{i:02d}", region) for i in range(n)]


def make_overlay(
    spec: list[tuple[str, str]], seed: int = 0, **node_kwargs
) -> tuple[Simulation, Overlay]:
    sim = make_sim(spec, seed=seed, **node_kwargs)
    return sim, Overlay(sim)


def make_kb(
    spec: list[tuple[str, str]],
    seed: int = 0,
    storage: list[str] | None = None,
    **kb_kwargs,
) -> tuple[Simulation, Overlay, KnowledgeBase]:
    """Simulation + overlay + knowledge base; all nodes store unless told otherwise."""
    sim, ov = make_overlay(spec, seed=seed)
    kb = KnowledgeBase(sim, ov, **kb_kwargs)
    for name in storage if storage is not None else [n for n, _ in spec]:
        kb.enable_storage(name)
    return sim, ov, kb


def make_fabric(
    spec: list[tuple[str, str]], seed: int = 0, covering_enabled: bool = True
) -> tuple[Simulation, EventFabric]:
    sim = make_sim(spec, seed=seed)
    return sim, EventFabric(sim, covering_enabled=covering_enabled)


def record_dicts(sim: Simulation) -> list[dict]:
    return [
        {"t": r.t, "kind": r.kind, "node": r.node, "detail": r.detail}
        for r in sim.records
    ]


@pytest.fixture
def sim4() -> Simulation:
    return make_sim([("a", "fife"), ("b", "fife"), ("c", "tayside"), ("d", "tayside")])
