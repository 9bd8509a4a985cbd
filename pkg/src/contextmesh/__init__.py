"""Deterministic simulator for overlay-routed pervasive event matching.

The pieces, roughly bottom to top: a discrete event kernel (`simkernel`),
a structured overlay with replicated storage (`overlay`), content-based
publish/subscribe over a broker tree (`pubsub`), a fact store with healing
and placement policies (`knowledge`), stream processing components
(`pipeline`), composite event matching (`matching`), bundle deployment
and self-evolution (`deploy`), and the scenario harness that wires a JSON
description into all of the above (`harness`).

Runs are reproducible: one seed, one virtual clock, no wall-clock or
iteration-order dependence anywhere.
"""

from .harness import RunResult, Scenario, load_scenario, load_scenario_file, run_scenario, stats
from .overlay import guid_of, node_id_for
from .pubsub import Constraint, Event, Geo, Subscription, covers, match
from .simkernel import NodeProfile, Simulation, TraceRecord

__version__ = "0.1.0"

__all__ = [
    "Constraint",
    "Event",
    "Geo",
    "NodeProfile",
    "RunResult",
    "Scenario",
    "Simulation",
    "Subscription",
    "TraceRecord",
    "__version__",
    "covers",
    "guid_of",
    "load_scenario",
    "load_scenario_file",
    "match",
    "node_id_for",
    "run_scenario",
    "stats",
]
