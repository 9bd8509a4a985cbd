"""Command line client for the simulation service.

Subcommands speak the service's HTTP wire format. Without ``--server`` the
requests are dispatched to an in-process application over an ASGI transport,
so no server needs to be running and outputs are identical either way.

Exit codes: 0 success, 1 at least one assertion failed, 2 anything that
prevented evaluation (bad scenario, unreadable file, server error).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Any

import httpx

EXIT_OK = 0
EXIT_ASSERTION_FAILED = 1
EXIT_ERROR = 2


def _make_client(server: str | None) -> httpx.AsyncClient:
    if server:
        return httpx.AsyncClient(base_url=server, timeout=600.0)
    from .service.app import app

    return httpx.AsyncClient(
        transport=httpx.ASGITransport(app=app),
        base_url="http://contextmesh.internal",
        timeout=None,
    )


async def _post(server: str | None, path: str, payload: dict) -> tuple[int, Any]:
    async with _make_client(server) as client:
        resp = await client.post(path, json=payload)
        try:
            return resp.status_code, resp.json()
        except ValueError:
            return resp.status_code, {"detail": resp.text}


def _post_sync(server: str | None, path: str, payload: dict) -> tuple[int, Any]:
    try:
        return asyncio.run(_post(server, path, payload))
    except httpx.HTTPError as exc:
        print(f"error: request failed: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR) from None


def _read_json_file(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR) from None
    except json.JSONDecodeError as exc:
        print(f"error: {path}: not valid JSON: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR) from None


def _read_text_file(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR) from None


def _report_assertions(results: list[dict]) -> None:
    for r in results:
        status = "PASS" if r["ok"] else "FAIL"
        print(f"{status}  {r['assertion']}")
        print(f"      {r['detail']}")


def cmd_run(args: argparse.Namespace) -> int:
    payload: dict[str, Any] = {"scenario": _read_json_file(args.scenario)}
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.until is not None:
        payload["until_ms"] = args.until
    status, data = _post_sync(args.server, "/runs", payload)
    if status != 200:
        print(f"error: {data.get('detail', data)}", file=sys.stderr)
        return EXIT_ERROR
    if args.trace:
        Path(args.trace).write_text(data["trace_jsonl"])
        print(f"trace written to {args.trace}")
    if args.metrics:
        Path(args.metrics).write_text(json.dumps(data["metrics"], indent=2, sort_keys=True))
        print(f"metrics written to {args.metrics}")
    print(
        f"run {data['name']} seed={data['seed']} until={data['until_ms']}ms "
        f"sent={data['counters']['sent']} delivered={data['counters']['delivered']}"
    )
    _report_assertions(data["assertions"])
    if not data["assertions"]:
        print("no assertions in scenario")
    return EXIT_OK if data["ok"] else EXIT_ASSERTION_FAILED


def cmd_validate(args: argparse.Namespace) -> int:
    payload = {"scenario": _read_json_file(args.scenario)}
    status, data = _post_sync(args.server, "/scenarios/validate", payload)
    if status != 200:
        print(f"invalid: {data.get('detail', data)}", file=sys.stderr)
        return EXIT_ERROR
    print(
        f"ok: {data['name']} ({data['nodes']} nodes, {data['matchlets']} matchlets, "
        f"{data['components']} components, {data['assertions']} assertions)"
    )
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    payload = {"trace_jsonl": _read_text_file(args.trace)}
    status, data = _post_sync(args.server, "/traces/stats", payload)
    if status != 200:
        print(f"error: {data.get('detail', data)}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(data["metrics"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_assert(args: argparse.Namespace) -> int:
    payload = {
        "trace_jsonl": _read_text_file(args.trace),
        "scenario": _read_json_file(args.scenario),
    }
    status, data = _post_sync(args.server, "/assertions/evaluate", payload)
    if status != 200:
        print(f"error: {data.get('detail', data)}", file=sys.stderr)
        return EXIT_ERROR
    _report_assertions(data["assertions"])
    return EXIT_OK if data["ok"] else EXIT_ASSERTION_FAILED


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("contextmesh.service.app:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contextmesh",
        description="Deterministic pervasive-matching simulator.",
    )
    parser.add_argument(
        "--server",
        default=None,
        help="base URL of a running service (default: in-process)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario and check its assertions")
    p_run.add_argument("--scenario", required=True, help="scenario JSON file")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument(
        "--until", type=int, default=None, help="run horizon in ms since epoch"
    )
    p_run.add_argument("--trace", default=None, help="write the JSONL trace here")
    p_run.add_argument("--metrics", default=None, help="write run metrics JSON here")
    p_run.set_defaults(fn=cmd_run)

    p_val = sub.add_parser("validate", help="check a scenario file without running it")
    p_val.add_argument("--scenario", required=True, help="scenario JSON file")
    p_val.set_defaults(fn=cmd_validate)

    p_stats = sub.add_parser("stats", help="summarize a stored trace")
    p_stats.add_argument("--trace", required=True, help="trace JSONL file")
    p_stats.set_defaults(fn=cmd_stats)

    p_assert = sub.add_parser(
        "assert", help="evaluate a scenario's assertions against a stored trace"
    )
    p_assert.add_argument("--scenario", required=True, help="scenario JSON file")
    p_assert.add_argument("--trace", required=True, help="trace JSONL file")
    p_assert.set_defaults(fn=cmd_assert)

    p_serve = sub.add_parser("serve", help="start the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
