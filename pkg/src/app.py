"""Poisoning proxy service.

Run through the CLI (`python -m src serve --config proxy.json`) or directly:
    BBW_PROXY_CONFIG=proxy.json uvicorn --factory src.app:app_from_env --port 8000
"""
import json
import logging
import os
import threading
import time
import uuid
from typing import Any, List, Optional

import numpy as np
import uvicorn
from fastapi import FastAPI, Request
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .backends import make_backend
from .config import LOG_LEVEL, load_document
from .errors import (AlignmentError, BackendUnavailable, BBWError, EmptyInputError,
                     FeatureDimensionError, UnknownImageError)
from .features import stat_features
from .geometry import BoundingBox, DetectedObject, ImageDetections
from .poisoner import FeatureSource, ProxyConfig, poison_response

logger = logging.getLogger(__name__)


# Models
class ObjectIn(BaseModel):
    category: int = Field(ge=0)
    a: float
    b: float
    w: float = Field(gt=0)
    h: float = Field(gt=0)
    confidence: Optional[float] = Field(default=None, ge=0, le=1)


class DetectRequest(BaseModel):
    image_id: str
    width: Optional[float] = Field(default=None, gt=0)
    height: Optional[float] = Field(default=None, gt=0)
    objects: Optional[List[ObjectIn]] = None
    features: Optional[List[List[float]]] = None
    crops: Optional[List[Any]] = None


class AuditLog:
    """Append-only JSON-lines audit trail; writes are serialized."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self._lock = threading.Lock()
        if path and os.path.dirname(path):
            os.makedirs(os.path.dirname(path), exist_ok=True)

    def write(self, entry: dict) -> None:
        if not self.path:
            return
        line = json.dumps(entry, separators=(",", ":"))
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


def _error(status: int, exc: BBWError) -> JSONResponse:
    return JSONResponse(status_code=status, content={"detail": exc.to_dict()})


def _bad_request(field: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={"detail": [{"loc": ["body", field], "msg": message}]})


def create_app(config: ProxyConfig, backend=None) -> FastAPI:
    """Build the proxy app around an immutable config and a detection backend."""
    backend = backend if backend is not None else make_backend(config.backend)
    audit = AuditLog(config.log_path)
    app = FastAPI(title="BBW Poisoning Proxy")

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": jsonable_encoder(exc.errors())})

    # Endpoints
    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "feature_source": config.feature_source.value,
            "backend": backend.kind.value,
            "trigger_model": {"m": config.trigger_model.m, "size": config.trigger_model.size},
        }

    @app.post("/detect")
    def detect(payload: DetectRequest):
        backend_rows = None
        if payload.objects is not None:
            if payload.width is None or payload.height is None:
                return _bad_request("width", "width and height are required with inline objects")
            try:
                detections = ImageDetections(
                    payload.image_id, payload.width, payload.height,
                    tuple(DetectedObject(o.category, BoundingBox(o.a, o.b, o.w, o.h), o.confidence)
                          for o in payload.objects))
            except ValueError as e:
                return _bad_request("objects", str(e))
        else:
            try:
                detections, backend_rows = backend.detect(payload.image_id, payload.width, payload.height)
            except UnknownImageError as e:
                return _error(404, e)
            except BackendUnavailable as e:
                logger.warning("[WARNING] %s", e)
                return _error(502, e)

        source = config.feature_source
        if source is FeatureSource.INLINE_FEATURES:
            if payload.features is None:
                return _bad_request("features", "required by the inline_features source")
            rows = payload.features
        elif source is FeatureSource.INLINE_CROPS:
            if payload.crops is None:
                return _bad_request("crops", "required by the inline_crops source")
            try:
                rows = [stat_features(np.asarray(c, dtype=np.float64)) for c in payload.crops]
            except (EmptyInputError, FeatureDimensionError, ValueError) as e:
                return _bad_request("crops", str(e))
        else:
            if payload.objects is not None:
                return _bad_request("objects", "the backend_features source reads features from the backend; "
                                               "inline objects carry none")
            if backend_rows is None:
                if detections.objects:
                    return _error(502, BackendUnavailable("backend response carries no per-object features"))
                backend_rows = np.zeros((0, config.trigger_model.m))
            rows = backend_rows

        try:
            result = poison_response(detections, rows, config)
        except AlignmentError as e:
            return _bad_request(source.value.split("_", 1)[1], e.message)
        except FeatureDimensionError as e:
            return _bad_request(source.value.split("_", 1)[1], e.message)

        audit.write({
            "request_id": uuid.uuid4().hex,
            "image_id": detections.image_id,
            "flags": [int(f) for f in result.flags],
            "rejected": list(result.rejected),
            "pattern": config.policy.pattern.value,
            "delta_w": config.policy.delta_w,
            "delta_h": config.policy.delta_h,
        })
        return JSONResponse(content=result.detections.to_record())

    app.state.config = config
    app.state.backend = backend
    return app


def app_from_env() -> FastAPI:
    """uvicorn factory: the proxy config path comes from BBW_PROXY_CONFIG."""
    path = os.getenv("BBW_PROXY_CONFIG", "proxy.json")
    config = ProxyConfig.from_dict(load_document(path), base_dir=os.path.dirname(os.path.abspath(path)))
    backend = make_backend(config.backend)
    backend.probe()
    return create_app(config, backend)


class ServiceHandle:
    """A proxy running in a background uvicorn server."""

    def __init__(self, server: uvicorn.Server, thread: threading.Thread, backend, host: str, port: int):
        self.server = server
        self.thread = thread
        self.backend = backend
        self.url = f"http://{host}:{port}"

    @property
    def running(self) -> bool:
        return self.thread.is_alive()

    def wait(self) -> None:
        try:
            while self.thread.is_alive():
                self.thread.join(timeout=0.5)
        except KeyboardInterrupt:
            self.stop()

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=10)
        self.backend.close()


def serve(config: ProxyConfig, host: str = "127.0.0.1", port: int = 8000,
          startup_timeout: float = 10.0) -> ServiceHandle:
    """Probe the backend, then start the proxy and return once it accepts requests."""
    backend = make_backend(config.backend)
    backend.probe()
    app = create_app(config, backend)
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level=LOG_LEVEL.lower()))
    thread = threading.Thread(target=server.run, name="bbw-proxy", daemon=True)
    thread.start()
    deadline = time.monotonic() + startup_timeout
    while not server.started and thread.is_alive() and time.monotonic() < deadline:
        time.sleep(0.05)
    if not server.started:
        server.should_exit = True
        raise BackendUnavailable(f"proxy failed to start on {host}:{port}")
    logger.info("[OK] Proxy listening on http://%s:%d (backend: %s)", host, port, config.backend.location)
    return ServiceHandle(server, thread, backend, host, port)
