"""Deterministic in-process mock backends for every capability.

The mock implements the same transport interface as the HTTP client, so the
gateway's caching, retries, and parallelism run unchanged on top of it. Each
capability is scripted; chat and vqa are strict (an unscripted request is an
error) so tests cannot silently rely on fabricated replies.
"""

from __future__ import annotations

import threading
from collections import Counter, deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import images
from .gateway import TransportError


class MockScriptError(Exception):
    """A strict mock capability received a request it has no script for."""


@dataclass(frozen=True)
class ScriptedReply:
    """Chat reply served when every needle appears in the rendered prompt."""

    needles: tuple[str, ...]
    reply: str


def _seed_color(seed: int) -> tuple[int, int, int]:
    rng = np.random.default_rng(seed)
    return tuple(int(v) for v in rng.integers(0, 256, size=3))


class MockBackend:
    """Transport double with call counters, fault injection, and an in-flight gauge."""

    def __init__(self, delay: float = 0.0):
        self.chat_script: list[ScriptedReply] = []
        self.vqa_script: dict[str, str] = {}
        self.detect_script: dict[str, list[tuple[float, float, float, float, float]]] = {}
        self.embed_script: dict[str, list[float]] = {}
        self.segment_handler: Optional[Callable[[dict], dict]] = None
        self.inpaint_handler: Optional[Callable[[dict], dict]] = None
        self.calls: Counter = Counter()
        self.delay = delay
        self._failures: dict[str, deque] = {}
        self._lock = threading.Lock()
        self._in_flight = 0
        self.high_water = 0

    # -- scripting ----------------------------------------------------------

    def script_chat(self, reply: str, *needles: str) -> None:
        self.chat_script.append(ScriptedReply(needles=tuple(needles), reply=reply))

    def script_vqa(self, question: str, answer: str) -> None:
        self.vqa_script[question] = answer

    def script_detect(self, query: str, boxes: list[tuple]) -> None:
        self.detect_script[query] = [tuple(b) for b in boxes]

    def script_embed(self, image_digest: str, vector: list[float]) -> None:
        self.embed_script[image_digest] = list(vector)

    def inject_failures(self, capability: str, count: int) -> None:
        """Make the next ``count`` calls to ``capability`` fail transiently."""
        queue = self._failures.setdefault(capability, deque())
        for _ in range(count):
            queue.append(TransportError(f"{capability}: injected transient failure"))

    # -- transport ------------------------------------------------------------

    def request(self, capability: str, body: dict) -> dict:
        with self._lock:
            self.calls[capability] += 1
            self._in_flight += 1
            self.high_water = max(self.high_water, self._in_flight)
            failure = None
            queue = self._failures.get(capability)
            if queue:
                failure = queue.popleft()
        try:
            if self.delay:
                import time

                time.sleep(self.delay)
            if failure is not None:
                raise failure
            handler = getattr(self, f"_handle_{capability}", None)
            if handler is None:
                raise MockScriptError(f"unknown capability {capability!r}")
            return handler(body)
        finally:
            with self._lock:
                self._in_flight -= 1

    # -- capability handlers ----------------------------------------------------

    def _handle_chat(self, body: dict) -> dict:
        text = "\n".join(str(m.get("content", "")) for m in body.get("messages", []))
        for entry in self.chat_script:
            if all(needle in text for needle in entry.needles):
                return {"text": entry.reply}
        tail = text[-200:]
        raise MockScriptError(f"no scripted chat reply for prompt ending with: {tail!r}")

    def _handle_detect(self, body: dict) -> dict:
        boxes = self.detect_script.get(body.get("query", ""), [])
        return {
            "boxes": [
                {"x0": b[0], "y0": b[1], "x1": b[2], "y1": b[3], "confidence": b[4]}
                for b in boxes
            ]
        }

    def _handle_segment(self, body: dict) -> dict:
        if self.segment_handler is not None:
            return self.segment_handler(body)
        # Default contract: echo the box as a filled rectangle.
        image = images.from_b64_png(body["image_b64"])
        h, w = image.shape[:2]
        box = body["box"]
        raster = np.zeros((h, w), dtype=np.uint8)
        x0, y0 = int(round(box["x0"])), int(round(box["y0"]))
        x1, y1 = int(round(box["x1"])), int(round(box["y1"]))
        raster[y0:y1, x0:x1] = 255
        return {"mask_b64": images.b64_png(raster)}

    def _handle_inpaint(self, body: dict) -> dict:
        if self.inpaint_handler is not None:
            return self.inpaint_handler(body)
        # Default contract: fill the mask=1 region with a solid color keyed by seed.
        image = images.from_b64_png(body["image_b64"]).copy()
        raster = images.from_b64_png(body["mask_b64"])
        color = _seed_color(int(body["seed"]))
        image[raster >= 128] = color
        return {"image_b64": images.b64_png(image)}

    def _handle_vqa(self, body: dict) -> dict:
        question = body.get("question", "")
        image_digest = images.sha256_bytes(body["image_b64"].encode("ascii"))
        keyed = f"{image_digest}:{question}"
        if keyed in self.vqa_script:
            return {"answer": self.vqa_script[keyed]}
        if question in self.vqa_script:
            return {"answer": self.vqa_script[question]}
        raise MockScriptError(f"no scripted vqa answer for question: {question!r}")

    def _handle_embed(self, body: dict) -> dict:
        digest = images.sha256_bytes(body["image_b64"].encode("ascii"))
        if digest in self.embed_script:
            return {"embedding": self.embed_script[digest]}
        # Deterministic pseudo-embedding derived from the image bytes.
        rng = np.random.default_rng(int(digest[:8], 16))
        vec = rng.normal(size=16)
        return {"embedding": [float(v) for v in vec]}

    def image_digest(self, image: np.ndarray) -> str:
        """Digest used to script vqa/embed replies for a specific image."""
        return images.sha256_bytes(images.b64_png(image).encode("ascii"))
