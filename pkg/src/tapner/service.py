"""HTTP service: metadata, batch annotation, and SSE streaming annotation.

Endpoints:

* ``GET /v1/meta`` — model/probe info, strategies, entity types, defaults.
* ``POST /v1/annotate`` — ``{"text": ...}`` to token-indexed entity spans.
* ``POST /v1/stream`` — ``{"prompt": ..., "params": {...}}`` to a
  ``text/event-stream`` of one JSON StreamEvent per event, terminated by an
  ``event: done`` message carrying the final text and entity set.

Malformed bodies are 400, exceeding the stream limit is 409, and prompts
that do not fit the model context are 422.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles

from .errors import ConfigError
from .model.decoding import DecodeParams
from .propagation import STRATEGIES
from .spans import SPAN_VARIANTS
from .streaming import Pipeline, PipelineConfig, _span_json, event_to_json

log = logging.getLogger(__name__)

DEFAULT_MAX_STREAMS = 4


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8756
    max_streams: int = DEFAULT_MAX_STREAMS
    frontend_dist: str | None = None


class _StreamGate:
    """Counting gate enforcing the concurrent-stream limit."""

    def __init__(self, limit: int):
        self._limit = limit
        self._active = 0
        self._lock = threading.Lock()

    def acquire(self) -> bool:
        with self._lock:
            if self._active >= self._limit:
                return False
            self._active += 1
            return True

    def release(self) -> None:
        with self._lock:
            self._active = max(0, self._active - 1)

    @property
    def active(self) -> int:
        return self._active


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def _merge_params(base: PipelineConfig, params: dict) -> PipelineConfig:
    """Apply request parameter overrides onto the default pipeline config."""
    allowed = {
        "strategy", "variant", "span_threshold", "adjacency_threshold",
        "window", "layer", "max_new_tokens", "repetition_penalty",
    }
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"unknown parameters: {sorted(unknown)}")
    decode = base.decode
    if "max_new_tokens" in params or "repetition_penalty" in params:
        decode = DecodeParams(
            max_new_tokens=int(params.get("max_new_tokens", decode.max_new_tokens)),
            repetition_penalty=float(
                params.get("repetition_penalty", decode.repetition_penalty)
            ),
        )
    return PipelineConfig(
        layer=int(params.get("layer", base.layer)),
        strategy=params.get("strategy", base.strategy),
        variant=params.get("variant", base.variant),
        span_threshold=float(params.get("span_threshold", base.span_threshold)),
        adjacency_threshold=float(
            params.get("adjacency_threshold", base.adjacency_threshold)
        ),
        window=int(params.get("window", base.window)),
        decode=decode,
    )


def create_app(pipeline: Pipeline, service_cfg: ServiceConfig | None = None) -> FastAPI:
    service_cfg = service_cfg or ServiceConfig()
    app = FastAPI(title="tapner", version="0.1.0")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    gate = _StreamGate(service_cfg.max_streams)
    model_cfg = pipeline.model.cfg

    async def _read_json(request: Request) -> dict | None:
        try:
            body = await request.json()
        except Exception:
            return None
        return body if isinstance(body, dict) else None

    @app.get("/v1/meta")
    def meta() -> dict:
        return {
            "model": {
                "config": model_cfg.as_dict(),
                "n_params": pipeline.model.n_params(),
            },
            "entity_types": pipeline.probes.entity_types,
            "labels": list(pipeline.labels),
            "strategies": list(STRATEGIES),
            "span_variants": list(SPAN_VARIANTS),
            "typing_layers": sorted(pipeline.probes.typing),
            "defaults": {
                "strategy": pipeline.cfg.strategy,
                "variant": pipeline.cfg.variant,
                "span_threshold": pipeline.cfg.span_threshold,
                "adjacency_threshold": pipeline.cfg.adjacency_threshold,
                "window": pipeline.cfg.window,
                "layer": pipeline.cfg.layer,
                "max_new_tokens": pipeline.cfg.decode.max_new_tokens,
                "repetition_penalty": pipeline.cfg.decode.repetition_penalty,
            },
            "limits": {
                "max_context": model_cfg.max_context,
                "max_streams": service_cfg.max_streams,
            },
        }

    @app.post("/v1/annotate")
    async def annotate(request: Request):
        body = await _read_json(request)
        if body is None or not isinstance(body.get("text"), str) or not body["text"].strip():
            return _error(400, "body must be a JSON object with a non-empty 'text' string")
        tokens = pipeline.vocab.encode(body["text"])
        if len(tokens) > model_cfg.max_context:
            return _error(422, f"text tokenizes to {len(tokens)} tokens, "
                               f"context is {model_cfg.max_context}")
        spans = pipeline.annotate_tokens(tokens)
        words = [pipeline.vocab.piece(t) for t in tokens]
        return {
            "tokens": words,
            "spans": [_span_json(s, words) for s in spans],
        }

    @app.post("/v1/stream")
    async def stream(request: Request):
        body = await _read_json(request)
        if body is None or not isinstance(body.get("prompt"), str) or not body["prompt"].strip():
            return _error(400, "body must be a JSON object with a non-empty 'prompt' string")
        params = body.get("params", {})
        if not isinstance(params, dict):
            return _error(400, "'params' must be an object")
        try:
            cfg = _merge_params(pipeline.cfg, params)
        except (ValueError, ConfigError) as exc:
            return _error(400, str(exc))
        prompt = pipeline.vocab.encode(body["prompt"])
        if len(prompt) + cfg.decode.max_new_tokens > model_cfg.max_context:
            return _error(422, f"prompt ({len(prompt)} tokens) + max_new_tokens "
                               f"({cfg.decode.max_new_tokens}) exceeds context "
                               f"{model_cfg.max_context}")
        try:
            run = pipeline.with_config(cfg)
        except ConfigError as exc:
            return _error(400, str(exc))
        if not gate.acquire():
            return _error(409, f"stream limit ({service_cfg.max_streams}) reached")

        def event_source():
            try:
                state, events = run.init_stream(prompt)
                words = [run.vocab.piece(t) for t in state.tokens]
                for ev in events:
                    yield _sse(event_to_json(ev, words))
                while not state.finished:
                    state, ev = run.step(state)
                    words = [run.vocab.piece(t) for t in state.tokens]
                    yield _sse(event_to_json(ev, words))
                final = {
                    "text": run.vocab.decode(state.tokens),
                    "tokens": words,
                    "entities": [_span_json(s, words) for s in state.entities],
                }
                yield _sse(final, event="done")
            except Exception as exc:  # surfaced to the client, then closed
                log.exception("stream failed")
                yield _sse({"error": str(exc)}, event="error")
            finally:
                gate.release()

        return StreamingResponse(event_source(), media_type="text/event-stream")

    dist = service_cfg.frontend_dist
    if dist and Path(dist).is_dir():
        app.mount("/", StaticFiles(directory=dist, html=True), name="playground")
    return app


def _sse(payload: dict, event: str | None = None) -> str:
    prefix = f"event: {event}\n" if event else ""
    return f"{prefix}data: {json.dumps(payload)}\n\n"


def serve(pipeline: Pipeline, service_cfg: ServiceConfig) -> None:
    """Run the service under uvicorn until interrupted."""
    import uvicorn

    app = create_app(pipeline, service_cfg)
    uvicorn.run(app, host=service_cfg.host, port=service_cfg.port, log_level="info")
