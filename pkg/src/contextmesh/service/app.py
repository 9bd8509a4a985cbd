"""FastAPI application exposing scenario runs, validation, and trace analysis.

Every endpoint is stateless: the scenario or trace travels in the request,
the full result travels back. Scenario problems surface as 400s with the
loader's path-qualified message.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..harness import (
    ScenarioError,
    assert_outcomes,
    load_scenario,
    parse_trace_jsonl,
    run_scenario,
    stats,
)
from .schemas import (
    AssertionResult,
    EvaluateRequest,
    EvaluateResponse,
    RunRequest,
    RunResponse,
    StatsRequest,
    StatsResponse,
    ValidateRequest,
    ValidateResponse,
)


def create_app() -> FastAPI:
    api = FastAPI(title="contextmesh", version=__version__)

    @api.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @api.post("/runs", response_model=RunResponse)
    def run(req: RunRequest) -> RunResponse:
        try:
            scenario = load_scenario(req.scenario)
            result = run_scenario(scenario, seed=req.seed, until=req.until_ms)
        except ScenarioError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        return RunResponse(
            name=result.name,
            seed=result.seed,
            until_ms=result.until_ms,
            ok=result.ok,
            counters=result.counters,
            metrics=result.metrics,
            assertions=[AssertionResult(**r) for r in result.assertions],
            trace_jsonl=result.trace_jsonl,
        )

    @api.post("/scenarios/validate", response_model=ValidateResponse)
    def validate(req: ValidateRequest) -> ValidateResponse:
        try:
            scenario = load_scenario(req.scenario)
        except ScenarioError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        return ValidateResponse(
            ok=True,
            name=scenario.name,
            nodes=len(scenario.nodes),
            matchlets=len(scenario.matchlets),
            components=len(scenario.components) + len(scenario.sensors),
            assertions=len(scenario.assertions),
        )

    @api.post("/traces/stats", response_model=StatsResponse)
    def trace_stats(req: StatsRequest) -> StatsResponse:
        try:
            records = parse_trace_jsonl(req.trace_jsonl)
        except ScenarioError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        return StatsResponse(metrics=stats(records))

    @api.post("/assertions/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest) -> EvaluateResponse:
        try:
            scenario = load_scenario(req.scenario)
            records = parse_trace_jsonl(req.trace_jsonl)
        except ScenarioError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        results = assert_outcomes(records, scenario.assertions)
        return EvaluateResponse(
            ok=all(r["ok"] for r in results),
            assertions=[AssertionResult(**r) for r in results],
        )

    return api


app = create_app()
