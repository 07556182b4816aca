"""HTTP surface: the six /v1/* capability endpoints plus /healthz."""

from __future__ import annotations

import logging
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from .config import CAPABILITIES, ShimConfig
from .providers import BadRequest, ProviderLoadError, build_handler

log = logging.getLogger(__name__)


class _WireModel(BaseModel):
    model_config = ConfigDict(extra="allow")


class ChatRequest(_WireModel):
    messages: list[dict]
    temperature: float = 0.0
    max_tokens: int = 1024
    cache_salt: Optional[str] = None


class DetectRequest(_WireModel):
    image_b64: str
    query: str = ""
    box_threshold: float = 0.0


class SegmentRequest(_WireModel):
    image_b64: str
    box: dict


class InpaintRequest(_WireModel):
    image_b64: str
    mask_b64: str
    caption: str = ""
    seed: int = 0
    guidance: dict = {}


class VqaRequest(_WireModel):
    image_b64: str
    question: str


class EmbedRequest(_WireModel):
    image_b64: str


_REQUEST_MODELS = {
    "chat": ChatRequest,
    "detect": DetectRequest,
    "segment": SegmentRequest,
    "inpaint": InpaintRequest,
    "vqa": VqaRequest,
    "embed": EmbedRequest,
}


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(config: Optional[ShimConfig] = None) -> FastAPI:
    config = config or ShimConfig()
    app = FastAPI(title="editshim", docs_url=None, redoc_url=None)

    handlers: dict[str, object] = {}
    failures: dict[str, str] = {}
    for capability in CAPABILITIES:
        name = config.providers.get(capability, "procedural")
        try:
            handlers[capability] = build_handler(capability, name, config.device)
        except ProviderLoadError as exc:
            failures[capability] = str(exc)
            log.warning("capability %s disabled: %s", capability, exc)

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        return _error(400, f"invalid request body: {exc.errors()[:3]}")

    @app.exception_handler(Exception)
    async def on_internal_error(request: Request, exc: Exception):
        log.exception("internal error")
        return _error(500, f"internal error: {exc}")

    def check_auth(request: Request) -> Optional[JSONResponse]:
        if config.api_key is None:
            return None
        header = request.headers.get("authorization", "")
        if header != f"Bearer {config.api_key}":
            return _error(401, "missing or invalid bearer token")
        return None

    def make_endpoint(capability: str, model_cls):
        async def endpoint(request: Request, body):  # type: ignore[valid-type]
            denied = check_auth(request)
            if denied is not None:
                return denied
            handler = handlers.get(capability)
            if handler is None:
                return _error(
                    503, f"capability {capability!r} is disabled: {failures[capability]}"
                )
            try:
                return handler(body.model_dump())
            except BadRequest as exc:
                return _error(400, str(exc))

        endpoint.__annotations__["body"] = model_cls
        return endpoint

    for capability, model_cls in _REQUEST_MODELS.items():
        app.post(f"/v1/{capability}")(make_endpoint(capability, model_cls))

    @app.get("/healthz")
    async def healthz():
        capabilities = {}
        for capability in CAPABILITIES:
            if capability in handlers:
                capabilities[capability] = {
                    "ok": True,
                    "provider": config.providers.get(capability, "procedural"),
                }
            else:
                capabilities[capability] = {"ok": False, "error": failures[capability]}
        status = "ok" if not failures else "degraded"
        return {"status": status, "capabilities": capabilities}

    return app
