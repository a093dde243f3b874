"""HTTP/WebSocket render service.

Model and weights are loaded once and shared read-only across handlers;
each WebSocket connection processes its messages sequentially so frames
never reorder within a connection.

WS protocol: the client sends {"seq": k, "mode": m, "params": {...}}; the
server replies with a binary message of a 4-byte little-endian seq prefix
followed by the PNG frame. Errors come back as JSON text messages carrying
the same seq.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from ..errors import ConfigError, ShapeError
from ..head_model import HeadModel
from ..pipeline import (
    RENDER_MODES,
    AvatarSession,
    RenderError,
    WeightBundle,
    model_info,
    parse_params,
    png_bytes,
    presets,
)
from .schemas import ModelInfo, RenderRequest


@dataclass
class ServiceConfig:
    model_path: Optional[str] = None
    weights_path: Optional[str] = None
    port: int = 8089
    frame_size: int = 256
    max_frame_size: int = 512
    default_mode: str = "neural"
    threads: Optional[int] = None
    albedo_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ConfigError(f"port {self.port} out of range")
        if self.default_mode not in RENDER_MODES:
            raise ConfigError(f"default mode {self.default_mode!r} unknown")


def _panel_dir() -> Optional[str]:
    cand = os.environ.get("CVTHEAD_PANEL_DIR")
    if cand and os.path.isdir(cand):
        return cand
    local = os.path.join(os.getcwd(), "frontend", "dist")
    return local if os.path.isdir(local) else None


def create_app(model: HeadModel, bundle: WeightBundle, config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="cvthead render service")
    session = AvatarSession(model, bundle, albedo_seed=config.albedo_seed)
    session.descriptors  # warm the cache before serving

    @app.exception_handler(RequestValidationError)
    async def validation_to_400(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        loc = ".".join(str(p) for p in first.get("loc", ()) if p != "body")
        return JSONResponse(status_code=400,
                            content={"detail": f"invalid field {loc or 'body'}: {first.get('msg', 'invalid')}"})

    def check_size(size: int) -> int:
        if not 1 <= size <= config.max_frame_size:
            raise ShapeError(f"field 'size' must be in [1, {config.max_frame_size}]")
        return size

    def render_png(body: RenderRequest) -> bytes:
        mode = body.mode or config.default_mode
        if mode not in RENDER_MODES:
            raise ShapeError(f"field 'mode' must be one of {RENDER_MODES}")
        size = check_size(body.size or config.frame_size)
        if mode == "neural":
            step = 1 << bundle.renderer_config.depth_levels
            if size % step:
                raise ShapeError(f"field 'size' must be divisible by {step} for neural mode")
        params = parse_params(model, body.params_json())
        image, _ = session.render_frame(params, mode, size, size)
        return png_bytes(image)

    @app.get("/v1/model", response_model=ModelInfo)
    def get_model():
        return model_info(model, config.frame_size)

    @app.get("/v1/presets")
    def get_presets():
        return presets(model)

    @app.post("/v1/render")
    def post_render(body: RenderRequest):
        try:
            png = render_png(body)
        except ShapeError as e:
            return JSONResponse(status_code=400, content={"detail": str(e)})
        except RenderError as e:
            return JSONResponse(status_code=500,
                                content={"detail": str(e), "stage": e.stage})
        return Response(content=png, media_type="image/png")

    @app.websocket("/v1/stream")
    async def stream(ws: WebSocket):
        await ws.accept()
        while True:
            try:
                msg = await ws.receive_json()
            except WebSocketDisconnect:
                break
            except Exception:
                await ws.send_json({"seq": None, "error": "message is not valid JSON"})
                continue
            seq = msg.get("seq")
            try:
                if not isinstance(seq, int) or seq < 0:
                    raise ShapeError("field 'seq' must be a non-negative integer")
                body = RenderRequest(mode=msg.get("mode"), size=msg.get("size"),
                                     **(msg.get("params") or {}))
                png = render_png(body)
                await ws.send_bytes(struct.pack("<I", seq) + png)
            except WebSocketDisconnect:
                break
            except Exception as e:
                await ws.send_json({"seq": seq if isinstance(seq, int) else None,
                                    "error": str(e)})

    panel = _panel_dir()
    if panel:
        app.mount("/", StaticFiles(directory=panel, html=True), name="panel")

    return app
