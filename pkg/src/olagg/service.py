"""HTTP/WebSocket facade over the engine for interactive clients.

Endpoints: POST /queries, GET /queries/{id}, POST /queries/{id}/stop and
WS /queries/{id}/stream?period=ms. Estimates stream at the client-requested
cadence; the server never takes a snapshot without a subscribed client.
Numeric payload fields travel as decimal strings so 64-bit values survive
client-side JSON parsing.
"""

from __future__ import annotations

import itertools
import threading
from pathlib import Path
from typing import Callable, Optional

from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .core import DatasetMeta, PlanError, Table
from .engine import Engine, EngineConfig, FaultPlan, QueryHandle, QueryTerminal, UnknownQuery
from .estimation import BoundsUnavailable
from .io import read_partitions
from .plan import plan_from_json

MIN_PERIOD_MS = 100

DatasetProvider = Callable[[Optional[str]], tuple[list[Table], DatasetMeta]]


def _default_provider(data_dir: Optional[str]) -> DatasetProvider:
    def provider(ref: Optional[str]) -> tuple[list[Table], DatasetMeta]:
        directory = ref or data_dir
        if directory is None:
            raise PlanError("no dataset: pass 'data' in the request or start "
                            "the service with a default directory")
        return read_partitions(Path(directory))

    return provider


def _group_key_label(key) -> str:
    if key is None:
        return ""
    return "|".join(str(part) for part in key)


class _QueryStreams:
    """Per-query strictly increasing event sequence numbers."""

    def __init__(self) -> None:
        self._counters: dict[str, itertools.count] = {}
        self._lock = threading.Lock()

    def next_sequence(self, query_id: str) -> int:
        with self._lock:
            counter = self._counters.setdefault(query_id, itertools.count(1))
        return next(counter)


def _refresh_state(handle: QueryHandle) -> str:
    with handle._state_lock:
        if handle.state == "running" and handle.all_nodes_settled():
            handle.state = "finished"
        return handle.state


def _status_of(handle: QueryHandle) -> str:
    state = _refresh_state(handle)
    if state != "running":
        return state
    if handle.dead_nodes():
        return "degraded"
    return "running"


def _estimates_payload(estimates: dict) -> list[dict]:
    return [
        {
            "key": _group_key_label(key),
            "estimator": repr(est.estimator),
            "lower": repr(est.lower),
            "upper": repr(est.upper),
        }
        for key, est in sorted(estimates.items(), key=lambda kv: _group_key_label(kv[0]))
    ]


def create_app(
    data_dir: Optional[str] = None,
    provider: Optional[DatasetProvider] = None,
    engine: Optional[Engine] = None,
    config: Optional[EngineConfig] = None,
) -> FastAPI:
    app = FastAPI(title="olagg", version="0.1.0")
    app.state.engine = engine or Engine(config)
    app.state.provider = provider or _default_provider(data_dir)
    app.state.streams = _QueryStreams()

    def build_event(handle: QueryHandle, status: Optional[str] = None) -> dict:
        engine: Engine = app.state.engine
        status = status or _status_of(handle)
        note = None
        estimates: dict = {}
        try:
            estimates = engine.request_partial(handle)
        except BoundsUnavailable as exc:
            note = str(exc)
        event = {
            "query_id": handle.query_id,
            "sequence": app.state.streams.next_sequence(handle.query_id),
            "status": status,
            "sample_fraction": repr(
                next(iter(estimates.values())).sample_fraction
                if estimates
                else handle.progress_fraction()
            ),
            "groups": _estimates_payload(estimates),
        }
        if note is not None:
            event["note"] = note
        return event

    @app.exception_handler(PlanError)
    async def plan_error_handler(request: Request, exc: PlanError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.post("/queries", status_code=201)
    async def submit(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse(status_code=400, content={"detail": "malformed JSON body"})
        if not isinstance(body, dict) or "plan" not in body:
            return JSONResponse(status_code=400, content={"detail": "body needs a 'plan'"})
        engine: Engine = app.state.engine
        query_id = body.get("id")
        if query_id is not None:
            try:
                engine.get(query_id)
                return JSONResponse(
                    status_code=409, content={"detail": f"query id {query_id!r} exists"}
                )
            except UnknownQuery:
                pass
        plan = plan_from_json(body["plan"])
        pacing_ms = body.get("pacing_ms", 0)
        if not isinstance(pacing_ms, (int, float)) or pacing_ms < 0:
            return JSONResponse(status_code=400,
                                content={"detail": "pacing_ms must be >= 0"})
        partitions, meta = await run_in_threadpool(app.state.provider, body.get("data"))
        fault_plan = None
        if pacing_ms:
            fault_plan = FaultPlan(delay_ms={i: float(pacing_ms) for i in range(len(partitions))})
        handle = await run_in_threadpool(
            lambda: engine.submit_query(
                plan, partitions, meta, query_id=query_id, fault_plan=fault_plan
            )
        )
        return {"id": handle.query_id}

    @app.get("/queries/{query_id}")
    async def status(query_id: str):
        engine: Engine = app.state.engine
        try:
            handle = engine.get(query_id)
        except UnknownQuery:
            return JSONResponse(status_code=404, content={"detail": "unknown query"})
        return {
            "id": handle.query_id,
            "status": _status_of(handle),
            "sample_fraction": repr(handle.progress_fraction()),
            "dead_nodes": handle.dead_nodes(),
            "nodes": [
                {
                    "node_id": n.node_id,
                    "status": n.status.value,
                    "progress": n.progress,
                    "cardinality": n.cardinality,
                }
                for n in handle.nodes
            ],
        }

    @app.post("/queries/{query_id}/stop")
    async def stop(query_id: str):
        engine: Engine = app.state.engine
        try:
            handle = engine.get(query_id)
        except UnknownQuery:
            return JSONResponse(status_code=404, content={"detail": "unknown query"})
        if _refresh_state(handle) != "running":
            return JSONResponse(status_code=410, content={"detail": "already terminal"})
        try:
            await run_in_threadpool(engine.stop_query, handle)
        except QueryTerminal:
            return JSONResponse(status_code=410, content={"detail": "already terminal"})
        return await run_in_threadpool(build_event, handle)

    @app.websocket("/queries/{query_id}/stream")
    async def stream(websocket: WebSocket, query_id: str, period: int = 1000):
        await websocket.accept()
        engine: Engine = app.state.engine
        try:
            handle = engine.get(query_id)
        except UnknownQuery:
            await websocket.send_json({"error": f"unknown query {query_id!r}"})
            await websocket.close(code=4404)
            return
        period_s = max(period, MIN_PERIOD_MS) / 1000.0
        import asyncio

        try:
            while True:
                status = _status_of(handle)
                event = await run_in_threadpool(build_event, handle, status)
                await websocket.send_json(event)
                if status in ("stopped", "finished"):
                    break
                try:
                    # Wake early if the client hangs up mid-query.
                    message = await asyncio.wait_for(
                        websocket.receive_text(), timeout=period_s
                    )
                    del message
                except asyncio.TimeoutError:
                    pass
        except WebSocketDisconnect:
            return
        await websocket.close()

    return app
