"""Request and response bodies for the simulation service."""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    scenario: dict[str, Any]
    seed: int | None = None
    until_ms: int | None = Field(default=None, ge=0)


class AssertionResult(BaseModel):
    kind: str
    assertion: str
    ok: bool
    detail: str


class RunResponse(BaseModel):
    name: str
    seed: int
    until_ms: int
    ok: bool
    counters: dict[str, int]
    metrics: dict[str, Any]
    assertions: list[AssertionResult]
    trace_jsonl: str


class ValidateRequest(BaseModel):
    scenario: dict[str, Any]


class ValidateResponse(BaseModel):
    ok: bool
    name: str
    nodes: int
    matchlets: int
    components: int
    assertions: int


class StatsRequest(BaseModel):
    trace_jsonl: str


class StatsResponse(BaseModel):
    metrics: dict[str, Any]


class EvaluateRequest(BaseModel):
    trace_jsonl: str
    scenario: dict[str, Any]


class EvaluateResponse(BaseModel):
    ok: bool
    assertions: list[AssertionResult]
