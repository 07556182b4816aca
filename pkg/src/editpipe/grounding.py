"""Grounding and supervision-image construction.

Turns a verdicted edit entity into a detection box plus segmentation mask,
and builds the two supervised conditioning images: a box outline drawn over
the input, and the mask region replaced by seeded noise. Both constructors
are pure and touch exactly the pixels of their declared region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import images
from .gateway import Gateway, GatewayError
from .manifest import Manifest
from .types import BBox, ImageRef, Mask, Stage

log = logging.getLogger(__name__)

DEFAULT_BOX_THRESHOLD = 0.35
DEFAULT_AREA_BOUNDS = (0.001, 0.95)
DEFAULT_STROKE_PX = 4
DEFAULT_BOX_COLOR = (255, 0, 0)

REASON_NO_GROUNDING = "no_grounding"
REASON_DEGENERATE_MASK = "degenerate_mask"
REASON_BACKEND = "backend"


class GroundingFailure(Exception):
    pass


class NoDetection(GroundingFailure):
    pass


class DegenerateMask(GroundingFailure):
    pass


@dataclass(frozen=True)
class NoiseParams:
    """Seeded uniform per-channel noise over [0, 255]."""

    seed: int
    low: int = 0
    high: int = 255


@dataclass(frozen=True)
class GroundingResult:
    entity: str
    box: BBox
    mask: Mask
    mask_area_fraction: float

    def __post_init__(self) -> None:
        if not (0.0 < self.mask_area_fraction <= 1.0):
            raise ValueError(f"mask area fraction {self.mask_area_fraction} outside (0,1]")


def _box_mask_overlap(box: BBox, mask: Mask) -> float:
    x0, y0, x1, y1 = box.as_int()
    inside = int(mask.bits[y0:y1, x0:x1].sum())
    total = mask.area
    return inside / total if total else 0.0


def ground_entity(
    image: np.ndarray,
    entity: str,
    gateway: Gateway,
    box_threshold: float = DEFAULT_BOX_THRESHOLD,
    area_bounds: tuple[float, float] = DEFAULT_AREA_BOUNDS,
) -> GroundingResult:
    """Detect the entity, segment the top box, and sanity-check the mask area."""
    if not entity:
        raise ValueError("entity must be non-empty")
    boxes = gateway.detect(image, entity, box_threshold)
    if not boxes:
        raise NoDetection(f"no detection for {entity!r} above threshold {box_threshold}")
    box = boxes[0]
    mask = gateway.segment(image, box)
    fraction = mask.area_fraction
    lo, hi = area_bounds
    if not (lo <= fraction <= hi):
        raise DegenerateMask(
            f"mask area fraction {fraction:.4f} outside [{lo}, {hi}] for {entity!r}"
        )
    if _box_mask_overlap(box, mask) < 0.5:
        raise DegenerateMask(
            f"detection box covers under half of the mask for {entity!r}"
        )
    return GroundingResult(entity=entity, box=box, mask=mask, mask_area_fraction=fraction)


def _band_bounds(box: BBox, stroke_px: int, width: int, height: int):
    x0, y0, x1, y1 = box.as_int()
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(width, x1), min(height, y1)
    return x0, y0, x1, y1


def draw_bbox(
    image: np.ndarray,
    box: BBox,
    stroke_px: int = DEFAULT_STROKE_PX,
    color: tuple[int, int, int] = DEFAULT_BOX_COLOR,
) -> np.ndarray:
    """Paint the box's perimeter band; every pixel outside the band is untouched.

    The band is the box rectangle minus its interior shrunk by ``stroke_px``
    on each side, i.e. an outline of that thickness just inside the box.
    """
    if stroke_px < 1:
        raise ValueError("stroke_px must be >= 1")
    h, w = image.shape[:2]
    box.validate_within(w, h)
    x0, y0, x1, y1 = _band_bounds(box, stroke_px, w, h)
    out = image.copy()
    band = np.zeros((h, w), dtype=bool)
    band[y0:y1, x0:x1] = True
    ix0, iy0 = x0 + stroke_px, y0 + stroke_px
    ix1, iy1 = x1 - stroke_px, y1 - stroke_px
    if ix0 < ix1 and iy0 < iy1:
        band[iy0:iy1, ix0:ix1] = False
    out[band] = color
    return out


def apply_mask_noise(image: np.ndarray, mask: Mask, noise: NoiseParams) -> np.ndarray:
    """Replace mask-on pixels with seeded uniform noise; mask-off pixels are untouched."""
    h, w = image.shape[:2]
    if (mask.width, mask.height) != (w, h):
        raise ValueError(f"mask {mask.width}x{mask.height} does not match image {w}x{h}")
    rng = np.random.default_rng(noise.seed)
    raster = rng.integers(noise.low, noise.high + 1, size=image.shape, dtype=np.int64)
    raster = raster.astype(np.uint8)
    out = image.copy()
    on = mask.bits.astype(bool)
    out[on] = raster[on]
    return out


def make_inpaint_input(
    image: np.ndarray, mask: Mask, dilation_radius: int = 0
) -> tuple[np.ndarray, Mask]:
    """Pass-through seam where mask dilation can be applied before inpainting."""
    if (mask.width, mask.height) != (image.shape[1], image.shape[0]):
        raise ValueError("mask dimensions do not match image")
    if dilation_radius < 0:
        raise ValueError("dilation_radius must be >= 0")
    if dilation_radius == 0:
        return image, mask
    size = 2 * dilation_radius + 1
    dilated = ndimage.binary_dilation(
        mask.bits.astype(bool), structure=np.ones((size, size), dtype=bool)
    )
    return image, Mask(width=mask.width, height=mask.height, bits=dilated.astype(np.uint8))


def run_ground_stage(
    manifest: Manifest,
    gateway: Gateway,
    box_threshold: float = DEFAULT_BOX_THRESHOLD,
    area_bounds: tuple[float, float] = DEFAULT_AREA_BOUNDS,
) -> Manifest:
    """Ground every verdicted record; masks are written beside the manifest."""
    out = manifest.clone()
    for rec in out.records:
        if not rec.alive or rec.stage is not Stage.VERDICTED:
            continue
        image = images.load_ref(
            ImageRef(path=rec.input_path, digest=rec.input_digest), out.base_dir
        )
        try:
            result = ground_entity(
                image, rec.verdict.entity, gateway, box_threshold, area_bounds
            )
        except NoDetection as exc:
            rec.reject(Stage.GROUNDED.value, REASON_NO_GROUNDING, str(exc))
            continue
        except DegenerateMask as exc:
            rec.reject(Stage.GROUNDED.value, REASON_DEGENERATE_MASK, str(exc))
            continue
        except GatewayError as exc:
            rec.reject(Stage.GROUNDED.value, REASON_BACKEND, str(exc))
            continue
        mask_name = f"{rec.id}.mask.png"
        images.save_mask(result.mask, Path(out.base_dir) / mask_name)
        rec.bbox = result.box
        rec.mask_path = mask_name
        rec.advance(Stage.GROUNDED)
    return out
