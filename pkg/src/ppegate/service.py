"""HTTP+JSON gate service.

    POST /v1/sessions                      -> {session_id}
    POST /v1/sessions/{id}/frames          (PNG/JPEG body) -> assessment
    GET  /v1/sessions/{id}                 -> {state, history}
    POST /v1/sessions/{id}/events {type}   -> {state} (InnerDoorClosed, Reset)
"""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path
from typing import Dict, Optional

from fastapi import FastAPI, HTTPException, Request

from ppegate.config import AppConfig
from ppegate.gate import (
    AssessmentError,
    IdentityProvider,
    InnerDoorClosed,
    MonotonicClock,
    Reset,
    Session,
    UnknownIdentity,
    handle_frame,
    session_log,
    state_name,
)
from ppegate.pipeline import Pipeline

log = logging.getLogger(__name__)

EVENTS = {"InnerDoorClosed": InnerDoorClosed, "Reset": Reset}


class GateService:
    """Session registry around a shared pipeline.

    Audit records go to ``<data_dir>/audit.jsonl``; only JSON text is ever
    written.
    """

    def __init__(
        self,
        config: AppConfig,
        pipeline: Optional[Pipeline] = None,
        identity: Optional[IdentityProvider] = None,
        clock: Optional[MonotonicClock] = None,
        data_dir: "str | Path | None" = None,
    ):
        self.config = config
        self.pipeline = pipeline or Pipeline.from_config(config.pipeline)
        self.identity = identity or UnknownIdentity()
        self.clock = clock or MonotonicClock()
        self.sessions: Dict[str, Session] = {}
        self._lock = threading.Lock()
        # backend instances are single-threaded
        self._pipeline_lock = threading.Lock()
        self._audit_lock = threading.Lock()
        data_dir = data_dir or config.server.data_dir
        self.data_dir = Path(data_dir) if data_dir else None
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)

    def _audit(self, session_id: str, record: dict) -> None:
        if self.data_dir is None:
            return
        line = json.dumps(record, sort_keys=True)
        with self._audit_lock, open(self.data_dir / "audit.jsonl", "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def create_session(self) -> Session:
        s = Session(
            self.config.policy,
            self.clock,
            window=self.pipeline.new_window(),
            audit=self._audit,
        )
        with self._lock:
            self.sessions[s.session_id] = s
        log.info("session %s created", s.session_id)
        return s

    def get(self, session_id: str) -> Session:
        with self._lock:
            s = self.sessions.get(session_id)
        if s is None:
            raise KeyError(session_id)
        return s

    def submit_frame(self, session_id: str, body: bytes, frame_id: Optional[str] = None) -> dict:
        s = self.get(session_id)
        result = handle_frame(
            s, body, self.pipeline, self.identity, frame_id=frame_id, pipeline_lock=self._pipeline_lock
        )
        log.info("session %s frame -> %s", session_id, state_name(result.state))
        return result.to_json()

    def post_event(self, session_id: str, event_type: str) -> dict:
        if event_type not in EVENTS:
            raise ValueError(f"unsupported event {event_type!r}")
        s = self.get(session_id)
        with s.lock:
            s.tick()
            s.dispatch(EVENTS[event_type]())
            return {"state": state_name(s.state)}

    def describe(self, session_id: str) -> dict:
        s = self.get(session_id)
        with s.lock:
            s.tick()
            return {"session_id": s.session_id, "state": state_name(s.state), "history": session_log(s)}


def create_app(service: GateService) -> FastAPI:
    app = FastAPI(title="PPE gate")

    def lookup(fn, *args):
        try:
            return fn(*args)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session") from None

    @app.post("/v1/sessions")
    def new_session():
        return {"session_id": service.create_session().session_id}

    @app.post("/v1/sessions/{session_id}/frames")
    async def post_frame(session_id: str, request: Request, frame_id: Optional[str] = None):
        body = await request.body()
        if not body:
            raise HTTPException(status_code=400, detail="empty frame body")
        try:
            return lookup(service.submit_frame, session_id, body, frame_id)
        except AssessmentError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        finally:
            del body

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        return lookup(service.describe, session_id)

    @app.post("/v1/sessions/{session_id}/events")
    async def post_event(session_id: str, request: Request):
        try:
            doc = await request.json()
            event_type = doc["type"]
        except (ValueError, KeyError, TypeError):
            raise HTTPException(status_code=400, detail="body must be {\"type\": ...}") from None
        try:
            return lookup(service.post_event, session_id, event_type)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None

    return app


def serve(config: AppConfig) -> None:  # pragma: no cover - blocking server
    import uvicorn

    service = GateService(config)
    uvicorn.run(create_app(service), host=config.server.host, port=config.server.port, log_config=None)
