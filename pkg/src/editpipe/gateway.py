"""Uniform client for the six remote model capabilities.

All capabilities share one wire shape: POST a JSON body, get a JSON body
back, images base64-encoded as lossless PNGs. The gateway adds the
cross-cutting behavior the pipeline relies on: a content-addressed response
cache keyed by the canonical request, bounded retries with doubling backoff,
a cap on in-flight backend calls, and normalization of backend quirks
(unsorted boxes, non-binary masks, non-unit embeddings).
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
import requests

from . import images
from .types import BBox, Mask

CAPABILITIES = ("chat", "detect", "segment", "inpaint", "vqa", "embed")

DEFAULT_GUIDANCE_TEXT = 7.5
DEFAULT_GUIDANCE_IMAGE = 1.5


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """Network-level failure; safe to retry."""


class BackendStatusError(GatewayError):
    """Non-2xx response; the body is echoed for diagnosis."""

    def __init__(self, capability: str, status: int, body: str):
        super().__init__(f"{capability}: backend returned {status}: {body}")
        self.capability = capability
        self.status = status
        self.body = body


class ProtocolError(GatewayError):
    """Backend answered 2xx but the payload violates the wire contract."""


@dataclass(frozen=True)
class Guidance:
    text: float = DEFAULT_GUIDANCE_TEXT
    image: float = DEFAULT_GUIDANCE_IMAGE


@dataclass
class BackendConfig:
    urls: dict[str, str] = field(default_factory=dict)
    api_key: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 2
    backoff: float = 0.5
    max_parallel: int = 4
    cache_dir: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_env(cls, env: Optional[dict] = None, **overrides) -> "BackendConfig":
        """Read FE_API_KEY, FE_CACHE_DIR and per-capability FE_<CAP>_URL."""
        env = dict(os.environ if env is None else env)
        urls = {}
        for cap in CAPABILITIES:
            key = f"FE_{cap.upper()}_URL"
            if env.get(key):
                urls[cap] = env[key]
        cache_dir = Path(env["FE_CACHE_DIR"]) if env.get("FE_CACHE_DIR") else None
        cfg = cls(urls=urls, api_key=env.get("FE_API_KEY"), cache_dir=cache_dir)
        for name, value in overrides.items():
            setattr(cfg, name, value)
        return cfg


def cache_key(capability: str, request_body: dict) -> str:
    """Stable hex key for a request: canonical JSON (sorted keys, no spaces)."""
    canonical = json.dumps(
        {"capability": capability, "request": request_body},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CacheEntry:
    key: str
    body: dict
    created_at: float


class ResponseCache:
    """Disk-backed response store; falls back to memory when no directory is set.

    Concurrent readers are fine; writes are atomic and, because the key is a
    content hash of the request, identical by construction.
    """

    def __init__(self, cache_dir: Optional[Path] = None):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, dict] = {}
        self._lock = threading.Lock()

    def get(self, key: str) -> Optional[dict]:
        if self.cache_dir is None:
            with self._lock:
                return self._memory.get(key)
        path = self.cache_dir / f"{key}.json"
        if not path.exists():
            return None
        entry = json.loads(path.read_text(encoding="utf-8"))
        return entry["body"]

    def put(self, key: str, response: dict) -> None:
        if self.cache_dir is None:
            with self._lock:
                self._memory[key] = response
            return
        entry = CacheEntry(key=key, body=response, created_at=time.time())
        images.write_atomic(
            self.cache_dir / f"{key}.json",
            json.dumps(
                {"key": entry.key, "created_at": entry.created_at, "body": entry.body},
                ensure_ascii=False,
            ).encode("utf-8"),
        )


class Transport(Protocol):
    def request(self, capability: str, body: dict) -> dict:
        """Perform one backend round trip; raise TransportError on network failure."""


class HttpTransport:
    """POSTs to the configured per-capability endpoints with bearer auth."""

    def __init__(self, config: BackendConfig):
        self.config = config
        self._session = requests.Session()

    def request(self, capability: str, body: dict) -> dict:
        url = self.config.urls.get(capability)
        if not url:
            raise GatewayError(f"no endpoint configured for capability {capability!r}")
        headers = {}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        try:
            resp = self._session.post(
                url, json=body, headers=headers, timeout=self.config.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"{capability}: {exc}") from exc
        if not resp.ok:
            raise BackendStatusError(capability, resp.status_code, resp.text)
        try:
            return resp.json()
        except ValueError as exc:
            raise ProtocolError(f"{capability}: non-JSON response") from exc


def endpoint_urls(base_url: str) -> dict[str, str]:
    """Fixed endpoint paths under one service root."""
    base = base_url.rstrip("/")
    return {cap: f"{base}/v1/{cap}" for cap in CAPABILITIES}


class Gateway:
    """Capability client shared across workers; stateless apart from the cache."""

    def __init__(
        self,
        transport: Transport,
        config: Optional[BackendConfig] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.transport = transport
        self.config = config or BackendConfig()
        self._sleep = sleep
        self.cache = ResponseCache(self.config.cache_dir)
        self._semaphore = threading.Semaphore(self.config.max_parallel)
        self._key_locks: dict[str, threading.Lock] = {}
        self._key_locks_guard = threading.Lock()

    # -- plumbing ---------------------------------------------------------

    def _lock_for(self, key: str) -> threading.Lock:
        with self._key_locks_guard:
            lock = self._key_locks.get(key)
            if lock is None:
                lock = self._key_locks[key] = threading.Lock()
            return lock

    def _call(self, capability: str, body: dict) -> dict:
        key = cache_key(capability, body)
        with self._lock_for(key):
            cached = self.cache.get(key)
            if cached is not None:
                return cached
            response = self._attempt(capability, body)
            self.cache.put(key, response)
            return response

    def _attempt(self, capability: str, body: dict) -> dict:
        attempts = 1 + self.config.max_retries
        delay = self.config.backoff
        last: Optional[Exception] = None
        for i in range(attempts):
            if i > 0:
                self._sleep(delay)
                delay *= 2
            try:
                with self._semaphore:
                    return self.transport.request(capability, body)
            except TransportError as exc:
                last = exc
        raise TransportError(
            f"{capability}: giving up after {attempts} attempts: {last}"
        ) from last

    # -- capabilities ------------------------------------------------------

    def chat(
        self,
        messages: list[dict],
        temperature: float = 0.0,
        max_tokens: int = 1024,
        cache_salt: Optional[str] = None,
    ) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        body: dict = {
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        if cache_salt is not None:
            body["cache_salt"] = cache_salt
        response = self._call("chat", body)
        if "text" not in response or not isinstance(response["text"], str):
            raise ProtocolError("chat: response lacks a text field")
        return response["text"]

    def detect(
        self, image: np.ndarray, query: str, box_threshold: float = 0.35
    ) -> list[BBox]:
        if not query:
            raise ValueError("query must be non-empty")
        h, w = image.shape[:2]
        body = {
            "image_b64": images.b64_png(image),
            "query": query,
            "box_threshold": box_threshold,
        }
        response = self._call("detect", body)
        raw = response.get("boxes")
        if not isinstance(raw, list):
            raise ProtocolError("detect: response lacks a boxes list")
        boxes = []
        for obj in raw:
            try:
                box = BBox.from_wire(obj)
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(f"detect: malformed box {obj!r}: {exc}") from exc
            box.validate_within(w, h)
            if box.confidence >= box_threshold:
                boxes.append(box)
        return sorted(boxes, key=lambda b: -b.confidence)

    def segment(self, image: np.ndarray, box: BBox) -> Mask:
        h, w = image.shape[:2]
        box.validate_within(w, h)
        body = {"image_b64": images.b64_png(image), "box": box.to_wire()}
        response = self._call("segment", body)
        if "mask_b64" not in response:
            raise ProtocolError("segment: response lacks mask_b64")
        raster = images.from_b64_png(response["mask_b64"])
        if raster.ndim != 2:
            raise ProtocolError("segment: mask is not single-channel")
        if raster.shape != (h, w):
            raise ProtocolError(
                f"segment: mask is {raster.shape[1]}x{raster.shape[0]}, "
                f"image is {w}x{h}"
            )
        return images.mask_from_wire(raster, w, h)

    def inpaint(
        self,
        image: np.ndarray,
        mask: Mask,
        caption: str,
        seed: int,
        guidance: Guidance = Guidance(),
    ) -> np.ndarray:
        h, w = image.shape[:2]
        if (mask.width, mask.height) != (w, h):
            raise ValueError(
                f"mask {mask.width}x{mask.height} does not match image {w}x{h}"
            )
        body = {
            "image_b64": images.b64_png(image),
            "mask_b64": images.b64_png(images.mask_to_wire(mask)),
            "caption": caption,
            "seed": seed,
            "guidance": {"text": guidance.text, "image": guidance.image},
        }
        response = self._call("inpaint", body)
        if "image_b64" not in response:
            raise ProtocolError("inpaint: response lacks image_b64")
        out = images.from_b64_png(response["image_b64"])
        if out.shape[:2] != (h, w):
            raise ProtocolError(
                f"inpaint: output is {out.shape[1]}x{out.shape[0]}, input is {w}x{h}"
            )
        return out

    def vqa(self, image: np.ndarray, question: str) -> str:
        if not question:
            raise ValueError("question must be non-empty")
        body = {"image_b64": images.b64_png(image), "question": question}
        response = self._call("vqa", body)
        if "answer" not in response or not isinstance(response["answer"], str):
            raise ProtocolError("vqa: response lacks an answer field")
        return response["answer"]

    def embed(self, image: np.ndarray) -> np.ndarray:
        body = {"image_b64": images.b64_png(image)}
        response = self._call("embed", body)
        raw = response.get("embedding")
        if not isinstance(raw, list) or not raw:
            raise ProtocolError("embed: response lacks an embedding list")
        vec = np.asarray(raw, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ProtocolError("embed: backend returned a zero vector")
        return vec / norm
