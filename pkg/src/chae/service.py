"""HTTP session service: iterative, human-steered sentence generation.

A session holds a story context (beginning plus every accepted sentence) and a
decoding configuration.  Each ``step`` supplies per-character control
conditions, generates exactly one sentence under the current context, and
appends it; ``undo`` removes the newest sentence.  Model parameters are shared
read-only across sessions; per-session mutation is serialized by a lock, so
concurrent steps execute one at a time while distinct sessions run in
parallel.

Errors are JSON ``{code, message, position?}``; ``position`` is set when a
control-condition parse error can point at an offending token.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field, replace

import numpy as np
from fastapi import Body, FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import __version__
from .decoding import DecodingConfig, generate_sentence
from .model import ChaeModel, ConfigError
from .textcodec import (
    ChaeFormatError,
    Vocabulary,
    detokenize,
    pad_conditions,
    serialize_chae,
    spec_from_json,
    spec_to_json,
    tokenize,
)

log = logging.getLogger(__name__)

_CONFIG_KEYS = ("strategy", "beam_size", "top_k", "temperature", "max_sentence_len", "seed")


class ServiceError(Exception):
    """An HTTP-mappable failure with a stable machine-readable code."""

    def __init__(self, status: int, code: str, message: str, position: int | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.position = position

    def response(self) -> JSONResponse:
        body = {"code": self.code, "message": str(self)}
        if self.position is not None:
            body["position"] = self.position
        return JSONResponse(status_code=self.status, content=body)


@dataclass
class HistoryEntry:
    """One accepted step: the conditions asked for and what came out."""

    spec_json: list[dict]
    sentence_tokens: list[str]
    tokens: list[str]
    ended: bool
    token_probs: list[float]
    p_gen: list[float] | None
    emotions: list[dict]

    def payload(self) -> dict:
        return {
            "chae": self.spec_json,
            "sentence": detokenize(self.sentence_tokens),
            "tokens": list(self.tokens),
            "ended": self.ended,
            "token_probs": list(self.token_probs),
            "p_gen_trace": None if self.p_gen is None else list(self.p_gen),
            "emotions": self.emotions,
        }


@dataclass
class Session:
    session_id: str
    beginning: str
    beginning_tokens: list[str]
    config: DecodingConfig
    created: float
    last_used: float
    history: list[HistoryEntry] = field(default_factory=list)
    # Re-entrant so snapshot() can be taken while the step/undo lock is held.
    lock: threading.RLock = field(default_factory=threading.RLock)

    def context_tokens(self) -> list[str]:
        tokens = list(self.beginning_tokens)
        for entry in self.history:
            tokens.extend(entry.sentence_tokens)
        return tokens

    def snapshot(self) -> dict:
        """Read-only transcript; ``story_spec`` is CLI-compatible input JSON."""
        return {
            "id": self.session_id,
            "beginning": self.beginning,
            "config": self.config.to_dict(),
            "sentences": [detokenize(e.sentence_tokens) for e in self.history],
            "history": [e.payload() for e in self.history],
            "context": detokenize(self.context_tokens()),
            "story_spec": {
                "beginning": self.beginning,
                "chae": [e.spec_json for e in self.history],
            },
            "created": self.created,
            "last_used": self.last_used,
        }


class SessionStore:
    """Thread-safe session registry with lazy TTL expiry."""

    def __init__(self, model: ChaeModel | None, vocab: Vocabulary | None,
                 ttl: float = 3600.0, persist_path=None):
        self.model = model
        self.vocab = vocab
        self.ttl = ttl
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        self._persist_path = persist_path
        self._persist_lock = threading.Lock()

    # -- plumbing ---------------------------------------------------------

    def require_model(self) -> ChaeModel:
        if self.model is None or self.vocab is None:
            raise ServiceError(503, "model_unavailable", "no model is loaded")
        return self.model

    def _persist(self, event: str, session_id: str, payload: dict | None = None) -> None:
        if not self._persist_path:
            return
        record = {"ts": time.time(), "event": event, "session": session_id}
        if payload:
            record["payload"] = payload
        with self._persist_lock, open(self._persist_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def sweep(self) -> None:
        """Drop sessions idle longer than the TTL."""
        cutoff = time.monotonic() - self.ttl
        with self._lock:
            expired = [sid for sid, s in self.sessions.items() if s.last_used < cutoff]
            for sid in expired:
                del self.sessions[sid]
        for sid in expired:
            log.info("expired idle session %s", sid)
            self._persist("expired", sid)

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise ServiceError(404, "unknown_session", f"no session {session_id!r}")
        return session

    # -- operations -------------------------------------------------------

    def create(self, beginning: str, config: DecodingConfig) -> Session:
        self.require_model()
        now = time.monotonic()
        session = Session(
            session_id=uuid.uuid4().hex,
            beginning=beginning,
            beginning_tokens=tokenize(beginning),
            config=config,
            created=now,
            last_used=now,
        )
        with self._lock:
            self.sessions[session.session_id] = session
        self._persist("created", session.session_id, {"beginning": beginning})
        return session

    def step(self, session_id: str, spec_json_rows: list, overrides: dict | None) -> dict:
        model = self.require_model()
        session = self.get(session_id)
        spec = spec_from_json(spec_json_rows)
        padded = pad_conditions(spec, model.config.k)
        config = _apply_overrides(session.config, overrides or {})
        with session.lock:
            step_index = len(session.history)
            rng = np.random.default_rng([config.seed or 0, step_index])
            result = generate_sentence(
                model, self.vocab, session.context_tokens(), padded, config, rng=rng
            )
            entry = HistoryEntry(
                spec_json=spec_to_json(padded),
                sentence_tokens=list(result.sentence_tokens),
                tokens=list(result.tokens),
                ended=result.ended,
                token_probs=[float(p) for p in result.token_probs],
                p_gen=None if result.p_gen is None else [float(p) for p in result.p_gen],
                emotions=[{"label": label, "probs": [float(p) for p in probs]}
                          for label, probs in result.emotions],
            )
            session.history.append(entry)
            session.last_used = time.monotonic()
            payload = entry.payload()
            payload["index"] = step_index
        self._persist("step", session_id, {"chae": entry.spec_json,
                                           "sentence": payload["sentence"]})
        return payload

    def undo(self, session_id: str) -> dict:
        session = self.get(session_id)
        with session.lock:
            if not session.history:
                raise ServiceError(409, "nothing_to_undo", "session has no generated sentences")
            session.history.pop()
            session.last_used = time.monotonic()
            snapshot = session.snapshot()
        self._persist("undo", session_id)
        return snapshot

    def delete(self, session_id: str) -> None:
        with self._lock:
            if session_id not in self.sessions:
                raise ServiceError(404, "unknown_session", f"no session {session_id!r}")
            del self.sessions[session_id]
        self._persist("deleted", session_id)


def _apply_overrides(config: DecodingConfig, overrides: dict) -> DecodingConfig:
    if not isinstance(overrides, dict):
        raise ServiceError(400, "bad_config", "'overrides' must be an object")
    unknown = set(overrides) - set(_CONFIG_KEYS)
    if unknown:
        raise ServiceError(400, "bad_config", f"unknown decoding settings: {', '.join(sorted(unknown))}")
    if not overrides:
        return config
    try:
        return replace(config, **overrides)
    except (ConfigError, TypeError) as exc:
        raise ServiceError(400, "bad_config", str(exc)) from exc


def _decoding_config(obj) -> DecodingConfig:
    if obj is None:
        return DecodingConfig()
    if not isinstance(obj, dict):
        raise ServiceError(400, "bad_config", "'config' must be an object")
    return _apply_overrides(DecodingConfig(), obj)


def create_app(model: ChaeModel | None, vocab: Vocabulary | None,
               ttl: float = 3600.0, persist_path=None, cors_origins=("*",)) -> FastAPI:
    """Build the service with a loaded model; pass None to serve 503s."""
    app = FastAPI(title="chae session service", version=__version__)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(cors_origins),
        allow_methods=["*"],
        allow_headers=["*"],
    )
    store = SessionStore(model, vocab, ttl=ttl, persist_path=persist_path)
    app.state.store = store

    @app.exception_handler(ServiceError)
    async def handle_service_error(_request, exc: ServiceError):
        return exc.response()

    @app.exception_handler(ChaeFormatError)
    async def handle_format_error(_request, exc: ChaeFormatError):
        position = getattr(exc, "position", None)
        return ServiceError(400, "bad_chae", str(exc), position).response()

    @app.exception_handler(RequestValidationError)
    async def handle_body_error(_request, exc: RequestValidationError):
        return ServiceError(400, "bad_json", "request body must be a JSON object").response()

    @app.middleware("http")
    async def sweep_idle_sessions(request: Request, call_next):
        store.sweep()
        return await call_next(request)

    @app.get("/v1/health")
    def health():
        body = {"status": "ok", "version": __version__, "sessions": len(store.sessions)}
        if store.model is not None:
            body["model"] = store.model.config.to_dict()
        return body

    @app.post("/v1/sessions", status_code=201)
    def create_session(payload: dict = Body(default={})):
        beginning = payload.get("beginning")
        if not isinstance(beginning, str) or not tokenize(beginning):
            raise ServiceError(400, "bad_beginning", "'beginning' must be non-empty text")
        config = _decoding_config(payload.get("config"))
        session = store.create(beginning, config)
        return {"id": session.session_id}

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        session = store.get(session_id)
        with session.lock:
            return session.snapshot()

    @app.delete("/v1/sessions/{session_id}", status_code=204)
    def delete_session(session_id: str):
        store.delete(session_id)
        return Response(status_code=204)

    @app.post("/v1/sessions/{session_id}/step")
    def step(session_id: str, payload: dict = Body(default={})):
        if "chae" not in payload:
            raise ServiceError(400, "bad_chae", "'chae' is required")
        return store.step(session_id, payload["chae"], payload.get("overrides"))

    @app.post("/v1/sessions/{session_id}/undo")
    def undo(session_id: str):
        return store.undo(session_id)

    @app.post("/v1/echo/chae")
    def echo_chae(payload: dict = Body(default={})):
        """Serialize conditions exactly as the model input assembler would."""
        store.require_model()
        if "chae" not in payload:
            raise ServiceError(400, "bad_chae", "'chae' is required")
        spec = spec_from_json(payload["chae"])
        padded = pad_conditions(spec, store.model.config.k)
        return {"tokens": serialize_chae(padded), "spec": spec_to_json(padded)}

    return app
