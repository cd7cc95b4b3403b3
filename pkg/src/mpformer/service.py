"""Serving: the retrieval engine, its HTTP app and the line-JSON transports.

Every transport speaks the same request/response schema. A request is one
JSON object::

    {"user": {"age": 3, "gender": 1, "region": 7, "user_id": 12, "device_id": 12},
     "history": [{"item": 41, "watch_ratio": 0.8, "like": 1}, ...],
     "q_total": 300, "mode": "exact"}

and the response carries ``candidates`` (item, score, objectives), the
realized ``quota`` per objective and the aggregated ``weights``.
"""
from __future__ import annotations

import json
import logging
import socketserver
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import IO, Literal

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .checkpoint import load_checkpoint
from .model import BehaviorEvent, ModelConfig, ModelParams, UserProfile, user_batch
from .retrieval import IndexBundle, encode_request_user, load_indices, retrieve

log = logging.getLogger(__name__)


class HashMismatch(RuntimeError):
    """The index was built from a different checkpoint than the one loaded."""


# -- schema ---------------------------------------------------------------------------

class UserIn(BaseModel):
    model_config = ConfigDict(extra="forbid")

    age: int = 0
    gender: int = 0
    region: int = 0
    user_id: int = 0
    device_id: int = 0


class HistoryEventIn(BaseModel):
    model_config = ConfigDict(extra="forbid")

    item: int
    watch_ratio: float = Field(0.0, ge=0.0, le=1.0)
    like: int = Field(0, ge=0, le=1)
    comment: int = Field(0, ge=0, le=1)
    share: int = Field(0, ge=0, le=1)
    # looked up in the catalog when omitted
    author: int | None = None
    tag: int | None = None
    ts: int = 0


class RetrieveRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    user: UserIn = Field(default_factory=UserIn)
    history: list[HistoryEventIn] = Field(default_factory=list)
    q_total: int = Field(..., ge=1)
    mode: Literal["exact", "approx"] = "exact"


class CandidateOut(BaseModel):
    item: int
    score: float
    objectives: list[str]


class RetrieveResponse(BaseModel):
    candidates: list[CandidateOut]
    quota: list[int]
    weights: list[float]
    flags: list[str] = Field(default_factory=list)


class HealthResponse(BaseModel):
    status: str
    checkpoint_hash: str
    objectives: list[str]
    index_sizes: list[int]


# -- engine -----------------------------------------------------------------------------

class ServingEngine:
    """Read-only model + indices; safe to share across threads."""

    def __init__(self, params: ModelParams, cfg: ModelConfig, bundle: IndexBundle, checkpoint_hash: str,
                 history_window: int | None = None, workers: int = 0):
        if bundle.checkpoint_hash != checkpoint_hash:
            raise HashMismatch(f"index built from checkpoint {bundle.checkpoint_hash[:12]} "
                               f"but serving checkpoint {checkpoint_hash[:12]}")
        if bundle.K != cfg.K:
            raise HashMismatch(f"index has {bundle.K} objectives, model has {cfg.K}")
        self.params = params
        self.cfg = cfg
        self.bundle = bundle
        self.checkpoint_hash = checkpoint_hash
        self.history_window = cfg.n_max if history_window is None else history_window
        self.pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None

    @classmethod
    def from_paths(cls, checkpoint: str | Path, index: str | Path, **kw) -> "ServingEngine":
        params, cfg, manifest, _ = load_checkpoint(checkpoint)
        return cls(params, cfg, load_indices(index), manifest["hash"], **kw)

    def _catalog(self, arr: np.ndarray, item: int) -> int:
        return int(arr[item]) if 0 <= item < arr.shape[0] else 0

    def events(self, req: RetrieveRequest) -> list[BehaviorEvent]:
        b = self.bundle
        return [BehaviorEvent(e.item, e.watch_ratio, e.like, e.comment, e.share,
                              self._catalog(b.item_author, e.item) if e.author is None else e.author,
                              self._catalog(b.item_tag, e.item) if e.tag is None else e.tag, e.ts)
                for e in req.history]

    def retrieve(self, req: RetrieveRequest) -> RetrieveResponse:
        if req.q_total < self.cfg.K:
            raise ValueError(f"q_total={req.q_total} must be >= K={self.cfg.K}")
        u = req.user
        profile = UserProfile(u.age, u.gender, u.region, u.user_id, u.device_id)
        batch = user_batch([profile], [self.events(req)], self.cfg.n_max)
        embs = encode_request_user(self.params, self.cfg, batch)[0]
        res = retrieve(embs, [e.item for e in req.history], req.q_total, self.bundle.indices, self.bundle.store,
                       mode=req.mode, history_window=self.history_window, pool=self.pool)
        names = self.cfg.objectives
        return RetrieveResponse(
            candidates=[CandidateOut(item=c.item, score=c.score, objectives=[names[k] for k in sorted(c.objectives)])
                        for c in res.candidates],
            quota=res.quota, weights=res.weights, flags=res.flags)

    def health(self) -> HealthResponse:
        return HealthResponse(status="ok", checkpoint_hash=self.checkpoint_hash,
                              objectives=list(self.cfg.objectives),
                              index_sizes=[len(ix) for ix in self.bundle.indices])

    def handle_line(self, line: str) -> str:
        """One request line in, one response line out; errors become ``{"error": ...}``."""
        try:
            req = RetrieveRequest.model_validate_json(line)
            return dump(self.retrieve(req))
        except ValidationError as exc:
            first = exc.errors()[0]
            field = ".".join(str(p) for p in first["loc"])
            return json.dumps({"error": {"type": "invalid_request", "field": field, "message": first["msg"]}})
        except ValueError as exc:
            return json.dumps({"error": {"type": "invalid_request", "message": str(exc)}})

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown()


def dump(resp: BaseModel) -> str:
    return json.dumps(resp.model_dump(), separators=(",", ":"))


# -- transports ------------------------------------------------------------------------------

def serve_stdio(engine: ServingEngine, stdin: IO[str] | None = None, stdout: IO[str] | None = None) -> int:
    """Answer each non-blank input line; returns the number of requests served."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    served = 0
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(engine.handle_line(line) + "\n")
        stdout.flush()
        served += 1
    return served


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace")
            if not line.strip():
                continue
            self.wfile.write((self.server.engine.handle_line(line) + "\n").encode("utf-8"))
            self.wfile.flush()


class LineServer(socketserver.ThreadingTCPServer):
    """The line protocol over TCP, one thread per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, engine: ServingEngine, host: str = "127.0.0.1", port: int = 0):
        self.engine = engine
        super().__init__((host, port), _LineHandler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def create_app(engine: ServingEngine) -> FastAPI:
    app = FastAPI(title="mpformer retrieval", version="0.1.0")

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return engine.health()

    @app.post("/retrieve", response_model=RetrieveResponse)
    def do_retrieve(req: RetrieveRequest) -> RetrieveResponse:
        try:
            return engine.retrieve(req)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    return app
