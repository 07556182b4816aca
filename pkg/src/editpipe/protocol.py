"""Wire-contract checks shared by the mock suite and live-service suites.

Any transport that speaks the six-capability protocol can be driven through
these checks with a Gateway on top; they assert the shape contracts the
pipeline depends on (sorted boxes, binary full-size masks, size-preserving
inpainting, unit embeddings, seed determinism).
"""

from __future__ import annotations

import numpy as np

from .gateway import Gateway
from .types import BBox


def contract_image(width: int = 64, height: int = 48, seed: int = 7) -> np.ndarray:
    """Deterministic synthetic scene: gradient background plus one solid object."""
    rng = np.random.default_rng(seed)
    x = np.linspace(40, 110, width, dtype=np.float64)
    y = np.linspace(60, 140, height, dtype=np.float64)
    base = np.stack(
        [
            np.tile(x, (height, 1)),
            np.tile(y[:, None], (1, width)),
            np.full((height, width), 90.0),
        ],
        axis=-1,
    )
    image = base.astype(np.uint8)
    color = tuple(int(v) for v in rng.integers(150, 255, size=3))
    x0, y0, x1, y1 = contract_box_coords(width, height)
    image[y0:y1, x0:x1] = color
    return image


def contract_box_coords(width: int = 64, height: int = 48) -> tuple[int, int, int, int]:
    return (width // 4, height // 4, (3 * width) // 4, (3 * height) // 4)


def contract_box(width: int = 64, height: int = 48) -> BBox:
    x0, y0, x1, y1 = contract_box_coords(width, height)
    return BBox(x0=x0, y0=y0, x1=x1, y1=y1, confidence=0.9)


def check_detect(gateway: Gateway, query: str = "object") -> list[BBox]:
    image = contract_image()
    boxes = gateway.detect(image, query, box_threshold=0.1)
    confidences = [b.confidence for b in boxes]
    assert confidences == sorted(confidences, reverse=True), "boxes not sorted"
    h, w = image.shape[:2]
    for box in boxes:
        box.validate_within(w, h)
    return boxes


def check_segment(gateway: Gateway) -> None:
    image = contract_image()
    mask = gateway.segment(image, contract_box())
    assert (mask.height, mask.width) == image.shape[:2], "mask size mismatch"
    assert set(np.unique(mask.bits)) <= {0, 1}, "mask not binary"


def check_inpaint(gateway: Gateway) -> None:
    image = contract_image()
    box = contract_box()
    mask = gateway.segment(image, box)
    first = gateway.inpaint(image, mask, "a repainted object", seed=11)
    again = gateway.inpaint(image, mask, "a repainted object", seed=11)
    assert first.shape == image.shape, "inpaint changed dimensions"
    assert np.array_equal(first, again), "same seed must reproduce the same image"


def check_vqa(gateway: Gateway, question: str = "Is there an object in the picture?") -> str:
    answer = gateway.vqa(contract_image(), question)
    assert isinstance(answer, str) and answer, "vqa answer empty"
    return answer


def check_embed(gateway: Gateway) -> None:
    vec = gateway.embed(contract_image())
    assert abs(float(np.linalg.norm(vec)) - 1.0) < 1e-9, "embedding not unit norm"


def check_chat(gateway: Gateway, prompt: str = "Reply with the word ready.") -> str:
    text = gateway.chat([{"role": "user", "content": prompt}])
    assert isinstance(text, str) and text, "chat reply empty"
    return text
