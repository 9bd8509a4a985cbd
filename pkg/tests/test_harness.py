"""Scenario loading, end-to-end runs, trace statistics, and outcome assertions.

Oracle values: time normalizations are hand-computed offsets from the scenario
epoch; percentile expectations follow the nearest-rank rule (index
ceil(q*n)-1 in the sorted sample); the ice-cream emission instant is the
sensor fire time plus one intra-region hop (2_700_000 + 5 ms).
"""

from __future__ import annotations

import json
from datetime import datetime
from pathlib import Path

import pytest

from contextmesh.harness import (
    ASSERTION_KINDS,
    POLICY_DEFAULTS,
    RunResult,
    ScenarioError,
    assert_outcomes,
    build_matchlet,
    load_scenario,
    load_scenario_file,
    norm_matchlet_def,
    norm_value,
    parse_epoch,
    parse_time_ms,
    parse_trace_jsonl,
    records_to_dicts,
    run_scenario,
    setup,
    stats,
)
from contextmesh.matching import CmpGuard, Ref
from contextmesh.pubsub import Geo

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "contextmesh" / "scenarios"
EPOCH = datetime.fromisoformat("2003-06-25T16:00:00")


def minimal(**overrides):
    base = {
        "name": "t",
        "epoch": "2020-01-01T00:00:00",
        "nodes": [
            {"name": "n0", "region": "fife"},
            {"name": "n1", "region": "fife"},
        ],
    }
    base.update(overrides)
    return base


# -- time literals ---------------------------------------------------------------


def test_time_literal_int_passthrough():
    assert parse_time_ms(0, EPOCH, "x") == 0
    assert parse_time_ms(1234, EPOCH, "x") == 1234
    assert parse_time_ms(-500, EPOCH, "x") == -500


def test_time_literal_clock_times_fall_on_epoch_date():
    assert parse_time_ms("16:05", EPOCH, "x") == 300_000
    assert parse_time_ms("16:00:30", EPOCH, "x") == 30_000
    # Before the epoch's time of day is simply negative.
    assert parse_time_ms("09:00", EPOCH, "x") == -25_200_000


def test_time_literal_iso_datetimes_are_epoch_relative():
    assert parse_time_ms("2003-06-25T16:30:00", EPOCH, "x") == 1_800_000
    assert parse_time_ms("2003-06-24T16:00:00", EPOCH, "x") == -86_400_000


@pytest.mark.parametrize(
    "bad", [True, False, 1.5, None, "25:00", "12:61", "12", "1:2:3:4", "banana"]
)
def test_time_literal_rejects_garbage(bad):
    with pytest.raises(ScenarioError, match="where-tag"):
        parse_time_ms(bad, EPOCH, "where-tag")


def test_epoch_parsing():
    assert parse_epoch("2003-06-25T16:00:00", "epoch") == EPOCH
    with pytest.raises(ScenarioError, match="epoch"):
        parse_epoch(12345, "epoch")
    with pytest.raises(ScenarioError, match="epoch"):
        parse_epoch("yesterday", "epoch")


# -- value normalization ----------------------------------------------------------


def test_norm_value_scalars_pass_through():
    for v in (True, 3, 2.5, "plain text"):
        assert norm_value(v, EPOCH, "x") == v


def test_norm_value_wrappers():
    assert norm_value({"geo": [56, -2]}, EPOCH, "x") == {"geo": [56.0, -2.0]}
    assert norm_value({"ms": "16:05"}, EPOCH, "x") == 300_000
    assert norm_value({"ms": 77}, EPOCH, "x") == 77


def test_norm_value_refs_only_where_allowed():
    assert norm_value("${v.attr}", EPOCH, "x", refs_ok=True) == "${v.attr}"
    with pytest.raises(ScenarioError, match="not allowed here"):
        norm_value("${v.attr}", EPOCH, "x")


@pytest.mark.parametrize(
    "bad",
    [
        {"geo": [1]},
        {"geo": ["a", 2]},
        {"geo": [True, 2]},
        {"geo": 5},
        {"mystery": 1},
        [1, 2],
    ],
)
def test_norm_value_rejects_bad_shapes(bad):
    with pytest.raises(ScenarioError):
        norm_value(bad, EPOCH, "x")


def test_matchlet_definition_builds_typed_guards():
    defn = norm_matchlet_def(
        {
            "id": "m",
            "window_ms": 1000,
            "patterns": [{"var": "p", "type": "ping"}],
            "guards": [{"kind": "cmp", "lhs": "${p.x}", "op": "ge", "rhs": 5}],
            "emit": [{"type": "pong", "attributes": {"echo": "${p.x}"}}],
        },
        EPOCH,
        "m",
    )
    m = build_matchlet(defn)
    assert m.matchlet_id == "m"
    assert m.patterns[0].var == "p"
    assert m.patterns[0].subscription.type_pattern == "ping"
    guard = m.guards[0]
    assert isinstance(guard, CmpGuard)
    assert guard.lhs == Ref("p", "x")
    assert guard.rhs == 5
    assert m.emit_events[0].attributes["echo"] == Ref("p", "x")


# -- scenario validation -----------------------------------------------------------


@pytest.mark.parametrize(
    "mutate,message",
    [
        (lambda d: d.update(nodes=[]), "non-empty node list"),
        (
            lambda d: d.update(
                nodes=[{"name": "a", "region": "r"}, {"name": "a", "region": "r"}]
            ),
            r"nodes\[1\].*duplicate",
        ),
        (lambda d: d.update(nodes=[{"name": "a"}]), "missing required field 'region'"),
        (lambda d: d.update(seed=True), "seed: must be an int"),
        (lambda d: d.update(until="1969-12-31T00:00:00"), "until: must not be negative"),
        (lambda d: d.update(policies={"mystery_knob": 1}), "unknown keys"),
        (lambda d: d.update(policies={"storelets": ["ghost"]}), "policies.storelets"),
        (
            lambda d: d.update(policies={"discovery_node": "ghost"}),
            "policies.discovery_node",
        ),
        (lambda d: d.update(facts=[{"body": {}}]), "missing required field 'kind'"),
        (
            lambda d: d.update(facts=[{"kind": "k", "origin": "ghost"}]),
            "unknown origin",
        ),
        (
            lambda d: d.update(
                matchlets=[{"id": "m", "node": "ghost", "window_ms": 1, "patterns": []}]
            ),
            r"matchlets\[0\].*unknown node",
        ),
        (
            lambda d: d.update(
                matchlets=[
                    {
                        "id": "m",
                        "node": "n0",
                        "window_ms": 0,
                        "patterns": [{"var": "p", "type": "t"}],
                    }
                ]
            ),
            "window_ms must be a positive int",
        ),
        (
            lambda d: d.update(
                components=[{"id": "c", "type": "mystery", "node": "n0"}]
            ),
            r"components\[0\].*type must be one of",
        ),
        (
            lambda d: d.update(
                components=[
                    {
                        "id": "c",
                        "type": "source",
                        "node": "n0",
                        "config": {
                            "schedule": [
                                {"at": 500, "type": "x"},
                                {"at": 100, "type": "x"},
                            ]
                        },
                    }
                ]
            ),
            "time-sorted",
        ),
        (
            lambda d: d.update(
                sensors=[{"id": "s", "node": "n0", "schedule": [], "outputs": ["ghost"]}]
            ),
            "unknown output",
        ),
        (
            lambda d: d.update(
                sensors=[
                    {"id": "dup", "node": "n0", "schedule": []},
                    {"id": "dup", "node": "n1", "schedule": []},
                ]
            ),
            "ids must be unique",
        ),
        (
            lambda d: d.update(constraints=[{"kind": "mystery"}]),
            "unknown constraint kind",
        ),
        (
            lambda d: d.update(
                constraints=[{"kind": "min_instances", "type": "t", "region": "r", "n": 0}]
            ),
            "n must be a positive int",
        ),
        (
            lambda d: d.update(churn=[{"op": "reboot", "node": "n0", "at": 1}]),
            "op must be crash or leave",
        ),
        (
            lambda d: d.update(churn=[{"op": "crash", "node": "ghost", "at": 1}]),
            r"churn\[0\].*unknown node",
        ),
        (
            lambda d: d.update(assertions=[{"kind": "mystery"}]),
            "unknown assertion kind",
        ),
        (
            lambda d: d.update(assertions=[{"kind": "metric_bound", "metric": "x"}]),
            "needs max and/or min",
        ),
        (
            lambda d: d.update(
                assertions=[{"kind": "event_emitted", "type": "t", "min_count": 0}]
            ),
            "min_count must be a positive int",
        ),
    ],
)
def test_scenario_validation_errors_name_their_path(mutate, message):
    data = minimal()
    mutate(data)
    with pytest.raises(ScenarioError, match=message):
        load_scenario(data)


def test_scenario_must_be_an_object():
    with pytest.raises(ScenarioError, match="JSON object"):
        load_scenario([1, 2])


def test_scenario_file_errors_name_the_path(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(ScenarioError, match="nope.json"):
        load_scenario_file(missing)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ScenarioError, match="not valid JSON"):
        load_scenario_file(bad)


def test_policy_defaults_fill_in():
    s = load_scenario(minimal())
    assert s.policies == POLICY_DEFAULTS
    assert s.seed == 0
    assert s.name == "t"
    assert s.until_ms is None


# -- the bundled scenarios ---------------------------------------------------------


def test_icecream_scenario_loads_and_normalizes():
    s = load_scenario_file(SCENARIOS / "icecream.scenario.json")
    assert s.name == "icecream"
    assert s.seed == 42
    assert s.until_ms == 3_660_000  # 17:01 on a 16:00 epoch
    assert len(s.nodes) == 6
    assert len(s.facts) == 10
    assert len(s.matchlets) == 2
    assert len(s.sensors) == 3
    assert len(s.assertions) == 4
    holiday = next(f for f in s.facts if f["kind"] == "holiday")
    assert holiday["body"]["from_ms"] == -489_600_000  # five days sixteen hours early
    hours = next(f for f in s.facts if f["kind"] == "opening-hours")
    assert hours["body"]["opens_ms"] == -25_200_000  # 09:00 before a 16:00 epoch
    assert hours["body"]["closes_ms"] == 3_600_000
    meet = s.matchlets[1]["definition"]["emit"][0]["attributes"]["meet_at_ms"]
    assert meet == 3_300_000  # 16:55


@pytest.fixture(scope="module")
def icecream_run() -> RunResult:
    return run_scenario(load_scenario_file(SCENARIOS / "icecream.scenario.json"))


def test_icecream_run_meets_for_icecream(icecream_run):
    result = icecream_run
    assert result.ok
    assert all(r["ok"] for r in result.assertions)
    assert len(result.assertions) == 4
    suggestions = [
        r
        for r in records_to_dicts(result.records)
        if r["kind"] == "pubsub.publish" and r["detail"]["type"] == "MeetSuggestion"
    ]
    # One per recipient, the instant the 16:45 sighting reaches the hub.
    assert [r["t"] for r in suggestions] == [2_700_005, 2_700_005]
    recipients = {r["detail"]["attributes"]["recipient"] for r in suggestions}
    assert recipients == {"anna", "bob"}
    for r in suggestions:
        assert r["detail"]["attributes"]["place"] == "Janetta's"
        assert r["detail"]["attributes"]["meet_at_ms"] == 3_300_000


def test_icecream_metrics_shape(icecream_run):
    m = icecream_run.metrics
    assert m["events_published"] >= 5  # three sensor events plus arrivals, suggestions
    assert m["match_latency_ms"]["count"] == 2
    assert m["match_latency_ms"]["p50"] == 5
    assert m["replica_availability"]["sample_ms"] == 1000
    assert m["replica_availability"]["min"] == 1.0  # no churn in this scenario
    # The series runs to the last trace record (the final suggestion at
    # t=2_700_005), not to the idle end of the horizon.
    assert len(m["replica_availability"]["series"]) == 2701
    assert icecream_run.records[-1].t // 1000 + 1 == 2701
    assert icecream_run.counters["sent"] > 0
    assert icecream_run.counters["delivered"] > 0


def test_icecream_same_seed_is_byte_identical(icecream_run):
    again = run_scenario(load_scenario_file(SCENARIOS / "icecream.scenario.json"))
    assert again.trace_jsonl == icecream_run.trace_jsonl
    assert again.metrics == icecream_run.metrics


def test_icecream_trace_round_trips_through_jsonl(icecream_run):
    parsed = parse_trace_jsonl(icecream_run.trace_jsonl)
    assert parsed == records_to_dicts(icecream_run.records)
    # Assertions evaluate identically on the re-read trace.
    s = load_scenario_file(SCENARIOS / "icecream.scenario.json")
    replay = assert_outcomes(parsed, s.assertions)
    assert replay == icecream_run.assertions


def test_icecream_setup_only_run_emits_nothing():
    s = load_scenario_file(SCENARIOS / "icecream.scenario.json")
    result = run_scenario(s, until=0)
    assert not result.ok
    kinds = {r.kind for r in result.records}
    assert "match.emit" not in kinds
    assert all(r.t == 0 for r in result.records)


def test_restaurant_run_tips_bob_once():
    s = load_scenario_file(SCENARIOS / "restaurant.scenario.json")
    result = run_scenario(s)
    assert result.ok
    alerts = [
        r
        for r in records_to_dicts(result.records)
        if r["kind"] == "pubsub.publish" and r["detail"]["type"] == "RecommendationAlert"
    ]
    assert len(alerts) == 1
    assert alerts[0]["t"] == 4_200_005  # the 19:10 walk-by, one hop later
    attrs = alerts[0]["detail"]["attributes"]
    assert attrs["recipient"] == "bob"
    assert attrs["venue"] == "Harbour View"
    assert attrs["from"] == "anna"


def test_run_scenario_needs_a_horizon():
    s = load_scenario(minimal())
    with pytest.raises(ScenarioError, match="no run horizon"):
        run_scenario(s)


def test_storelet_policy_restricts_placement():
    data = minimal(
        nodes=[{"name": f"n{i}", "region": "fife"} for i in range(5)],
        policies={"storelets": ["n0", "n1", "n2"], "replica_k": 3},
        facts=[{"kind": "note", "body": {"text": "hi"}}],
        until=0,
    )
    result = run_scenario(load_scenario(data))
    puts = [
        r
        for r in records_to_dicts(result.records)
        if r["kind"] == "kb.put"
        and r["detail"].get("kind") == "note"
        and not r["detail"].get("index")
    ]
    assert len(puts) == 1
    assert set(puts[0]["detail"]["holders"]) == {"n0", "n1", "n2"}
    assert not puts[0]["detail"]["degraded"]


def test_constraint_repair_scenario_end_to_end():
    data = minimal(
        nodes=[{"name": f"n{i}", "region": "fife"} for i in range(4)],
        policies={"storelets": ["n0", "n1", "n2"], "replica_k": 3},
        facts=[{"kind": "note", "body": {"text": "keep me"}}],
        constraints=[{"kind": "min_instances", "type": "storelet", "region": "fife", "n": 3}],
        churn=[{"op": "crash", "node": "n1", "at": 5_000}],
        assertions=[
            {
                "kind": "constraint_satisfied_by",
                "constraint": "min_instances(storelet,fife,3)",
                "by": 16_000,
            },
            {"kind": "replica_count_at", "fact_kind": "note", "at": 24_000, "min": 3},
            {"kind": "metric_bound", "metric": "replica_availability.min", "min": 0.9},
        ],
        until=25_000,
    )
    result = run_scenario(load_scenario(data))
    assert [r["ok"] for r in result.assertions] == [True, True, True]
    assert result.ok
    records = records_to_dicts(result.records)
    storelet_accepts = [
        r
        for r in records
        if r["kind"] == "deploy.accept"
        and r["detail"]["type"] == "storelet"
        and r["t"] > 5_000
    ]
    # Exactly one replacement, on the node that had no storelet yet.
    assert len(storelet_accepts) == 1
    assert storelet_accepts[0]["detail"]["node"] == "n3"
    assert result.metrics["violation_ms"] != {}


def test_discovery_scenario_deploys_from_directory():
    data = minimal(
        policies={"discovery_node": "n0"},
        directory=[
            {
                "types": ["ping"],
                "matchlet": {
                    "id": "auto",
                    "window_ms": 60_000,
                    "patterns": [{"var": "p", "type": "ping"}],
                    "emit": [{"type": "pong", "attributes": {"from": "${p.who}"}}],
                },
            }
        ],
        sensors=[
            {
                "id": "s",
                "node": "n1",
                "schedule": [{"at": 1_000, "type": "ping", "attributes": {"who": "z"}}],
            }
        ],
        assertions=[
            {
                "kind": "event_emitted",
                "type": "pong",
                "where": {"from": "z"},
                "not_before": 1_000,
                "by": 1_100,
            }
        ],
        until=3_000,
    )
    result = run_scenario(load_scenario(data))
    assert result.ok
    records = records_to_dicts(result.records)
    deploys = [r for r in records if r["kind"] == "match.discovery_deploy"]
    assert [r["detail"] for r in deploys] == [{"type": "ping", "matchlet": "auto"}]
    accepts = [
        r for r in records if r["kind"] == "deploy.accept" and r["detail"]["type"] == "matchlet"
    ]
    assert len(accepts) == 1
    assert accepts[0]["detail"]["node"] == "n0"


# -- statistics --------------------------------------------------------------------


def rec(t, kind, node="n", **detail):
    return {"t": t, "kind": kind, "node": node, "detail": detail}


def drec(t, kind, detail, node="n"):
    """Like rec(), for details whose keys collide with record fields."""
    return {"t": t, "kind": kind, "node": node, "detail": detail}


def test_stats_empty_trace():
    m = stats([])
    assert m["counts"] == {}
    assert m["events_published"] == 0
    assert m["delivery_latency_ms"] == {"count": 0}
    assert m["match_latency_ms"] == {"count": 0}
    assert m["fetch_hops"] == {"count": 0}
    assert m["fetch_sources"] == {}
    assert m["drops"] == {}
    assert m["violation_ms"] == {}
    assert m["replica_availability"] == {"sample_ms": 1000, "min": 0.0, "series": []}


def test_stats_latency_percentiles_nearest_rank():
    records = []
    for i, latency in enumerate([9, 3, 5]):
        records.append(rec(i, "pubsub.publish", event_id=i, type="t", attributes={}, ts=i))
        records.append(
            rec(i, "pubsub.deliver", event_id=i, type="t", sink="s", latency_ms=latency)
        )
    m = stats(records)
    assert m["events_published"] == 3
    d = m["delivery_latency_ms"]
    assert d == {"count": 3, "p50": 5, "p95": 9, "max": 9}


def test_stats_match_latency_uses_latest_contributor():
    records = [
        rec(100, "pubsub.publish", event_id=1, type="a", attributes={}, ts=100),
        rec(400, "pubsub.publish", event_id=2, type="b", attributes={}, ts=400),
        rec(
            460,
            "match.emit",
            matchlet="m",
            event_id=3,
            type="out",
            attributes={},
            contributors=[1, 2],
            template=0,
        ),
    ]
    m = stats(records)
    assert m["match_latency_ms"] == {"count": 1, "p50": 60, "p95": 60, "max": 60}


def test_stats_fetches_and_drops():
    records = [
        rec(1, "overlay.fetch", guid="g", hops=0, source="cache", ok=True),
        rec(2, "overlay.fetch", guid="g", hops=2, source="store", ok=True),
        rec(3, "overlay.fetch", guid="h", hops=3, source="none", ok=False),
        rec(4, "pipe.drop", component="c", reason="overflow"),
        rec(5, "pipe.drop", component="c", reason="overflow"),
        rec(6, "pipe.drop", component="c", reason="dead_node"),
        rec(7, "net.drop", **{"from": "a", "payload": "X"}),
    ]
    m = stats(records)
    assert m["fetch_hops"] == {"count": 2, "p50": 0, "p95": 2, "max": 2}
    assert m["fetch_sources"] == {"cache": 1, "store": 1}
    assert m["drops"] == {"dead_node": 1, "net": 1, "overflow": 2}


def test_stats_violation_durations():
    records = [
        rec(10, "evolve.violation", constraint="c1", count=1),
        rec(250, "evolve.satisfied", constraint="c1", count=2),
        rec(300, "evolve.violation", constraint="c2", count=0),
        rec(900, "noop"),
    ]
    m = stats(records)
    # c1 closed after 240 ms; c2 still open at the end of the trace.
    assert m["violation_ms"] == {"c1": 240, "c2": 600}


def test_stats_replica_availability_series():
    records = [
        drec(0, "kb.put", {"guid": "g", "kind": "note", "subject": None, "holders": ["a", "b"], "degraded": False}),
        drec(1100, "node.crash", {}, node="a"),
        drec(2100, "node.crash", {}, node="b"),
        rec(3000, "noop"),
    ]
    m = stats(records)
    avail = m["replica_availability"]
    assert avail["series"] == [1.0, 1.0, 1.0, 0.0]
    assert avail["min"] == 0.0


def test_stats_ignores_index_puts_in_census():
    records = [
        drec(0, "kb.put", {"guid": "g", "kind": "note", "subject": None, "holders": ["a"], "degraded": False}),
        drec(0, "kb.put", {"guid": "i", "kind": "note", "holders": ["b"], "degraded": False, "index": True}),
        drec(500, "node.crash", {}, node="b"),
        rec(1000, "noop"),
    ]
    avail = stats(records)["replica_availability"]
    # Only the fact itself is tracked; losing the index holder changes nothing.
    assert avail["series"] == [1.0, 1.0]


def test_parse_trace_jsonl_errors():
    with pytest.raises(ScenarioError, match="trace line 2: not valid JSON"):
        parse_trace_jsonl('{"t":1,"kind":"k","node":"n","detail":{}}\n{oops\n')
    with pytest.raises(ScenarioError, match="trace line 1: not a trace record"):
        parse_trace_jsonl('{"x":1}\n')
    assert parse_trace_jsonl("\n\n") == []


# -- assertion evaluators -----------------------------------------------------------


def publish(t, type_name, node="n", **attrs):
    return rec(t, "pubsub.publish", node=node, event_id=t, type=type_name, attributes=attrs, ts=t)


def outcome(records, assertion):
    return assert_outcomes(records, [assertion])[0]


def test_event_emitted_window_is_inclusive():
    records = [publish(100, "hit"), publish(200, "hit"), publish(300, "hit")]
    a = {"kind": "event_emitted", "type": "hit", "not_before": 100, "by": 300, "min_count": 3}
    assert outcome(records, a)["ok"]
    a = {"kind": "event_emitted", "type": "hit", "not_before": 101, "by": 299, "min_count": 1}
    r = outcome(records, a)
    assert r["ok"] and "1 emission(s)" in r["detail"]
    a = {"kind": "event_emitted", "type": "hit", "not_before": 101, "by": 299, "min_count": 2}
    assert not outcome(records, a)["ok"]


def test_event_emitted_filters_node_and_attributes():
    records = [publish(100, "hit", node="a", user="x"), publish(200, "hit", node="b", user="y")]
    a = {"kind": "event_emitted", "type": "hit", "node": "b", "min_count": 1}
    assert outcome(records, a)["ok"]
    a = {"kind": "event_emitted", "type": "hit", "where": {"user": "z"}, "min_count": 1}
    assert not outcome(records, a)["ok"]
    a = {"kind": "event_emitted", "type": "hit", "where": {"user": "x"}, "min_count": 1}
    assert outcome(records, a)["ok"]


def test_no_event_upper_bound_is_exclusive():
    records = [publish(500, "boom")]
    assert outcome(records, {"kind": "no_event", "type": "boom", "before": 500})["ok"]
    assert not outcome(records, {"kind": "no_event", "type": "boom", "before": 501})["ok"]
    assert outcome(records, {"kind": "no_event", "type": "boom", "from": 501})["ok"]
    assert not outcome(records, {"kind": "no_event", "type": "boom", "from": 500})["ok"]
    assert outcome(records, {"kind": "no_event", "type": "other"})["ok"]


def test_replica_count_at_walks_the_census():
    records = [
        drec(0, "kb.put", {"guid": "g", "kind": "note", "subject": "s", "holders": ["a", "b", "c"], "degraded": False}),
        drec(500, "node.crash", {}, node="c"),
        drec(800, "kb.heal", {"guid": "g", "added": ["d"], "confirmed": 2}, node="a"),
    ]
    a = {"kind": "replica_count_at", "fact_kind": "note", "at": 1000, "min": 3}
    r = outcome(records, a)
    assert r["ok"] and "minimum census 3" in r["detail"]
    # At t=600 the crash has bitten but the heal has not yet run.
    assert not outcome(records, {"kind": "replica_count_at", "fact_kind": "note", "at": 600, "min": 3})["ok"]
    assert outcome(records, {"kind": "replica_count_at", "fact_kind": "note", "at": 600, "min": 2})["ok"]
    # Subject and kind filters select which puts join the census.
    a = {"kind": "replica_count_at", "fact_kind": "note", "subject": "other", "at": 1000, "min": 1}
    r = outcome(records, a)
    assert not r["ok"] and "no facts" in r["detail"]
    assert not outcome(records, {"kind": "replica_count_at", "fact_kind": "ghost", "at": 1000, "min": 1})["ok"]


def test_constraint_satisfied_by_looks_at_last_transition():
    records = [
        rec(100, "evolve.violation", constraint="c", count=1),
        rec(500, "evolve.satisfied", constraint="c", count=2),
    ]
    a = {"kind": "constraint_satisfied_by", "constraint": "c", "by": 1000}
    r = outcome(records, a)
    assert r["ok"] and "evolve.satisfied at t=500" in r["detail"]
    # Satisfaction arriving after the deadline does not count.
    assert not outcome(records, {"kind": "constraint_satisfied_by", "constraint": "c", "by": 400})["ok"]
    r = outcome(records, {"kind": "constraint_satisfied_by", "constraint": "other", "by": 400})
    assert r["ok"] and "never reported" in r["detail"]


def test_metric_bound_walks_dotted_path():
    records = [
        rec(1, "pubsub.publish", event_id=1, type="t", attributes={}, ts=1),
        rec(1, "pubsub.deliver", event_id=1, type="t", sink="s", latency_ms=40),
    ]
    assert outcome(records, {"kind": "metric_bound", "metric": "delivery_latency_ms.p95", "max": 40})["ok"]
    assert not outcome(records, {"kind": "metric_bound", "metric": "delivery_latency_ms.p95", "max": 39})["ok"]
    assert outcome(records, {"kind": "metric_bound", "metric": "events_published", "min": 1})["ok"]
    r = outcome(records, {"kind": "metric_bound", "metric": "no.such.metric", "max": 1})
    assert not r["ok"] and "not present" in r["detail"]
    r = outcome(records, {"kind": "metric_bound", "metric": "counts", "max": 1})
    assert not r["ok"] and "not numeric" in r["detail"]


def test_assertion_result_rows_are_self_describing():
    rows = assert_outcomes([], [{"kind": "no_event", "type": "x"}])
    assert rows[0]["kind"] == "no_event"
    assert rows[0]["ok"]
    assert json.loads(rows[0]["assertion"].split(" ", 1)[1]) == {"type": "x"}
    assert set(ASSERTION_KINDS) == {
        "event_emitted",
        "no_event",
        "replica_count_at",
        "constraint_satisfied_by",
        "metric_bound",
    }
