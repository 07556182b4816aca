"""Raster IO helpers: lossless PNG load/save, base64 wire coding, digests.

Images are (H, W, 3) uint8 arrays everywhere in the pipeline; masks travel
on the wire as single-channel 0/255 PNGs and live in memory as 0/1 rasters.
"""

from __future__ import annotations

import base64
import hashlib
import io
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .types import ImageRef, Mask


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def png_bytes(arr: np.ndarray) -> bytes:
    if arr.ndim == 2:
        im = Image.fromarray(arr, mode="L")
    else:
        im = Image.fromarray(arr, mode="RGB")
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def from_png_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        if im.mode in ("L", "I;16", "1"):
            return np.asarray(im.convert("L"), dtype=np.uint8)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def b64_png(arr: np.ndarray) -> str:
    return base64.b64encode(png_bytes(arr)).decode("ascii")


def from_b64_png(data: str) -> np.ndarray:
    return from_png_bytes(base64.b64decode(data))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: str | Path, data: bytes) -> None:
    """Write via temp file + rename so readers never see a torn file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_png(arr: np.ndarray, path: str | Path) -> None:
    write_atomic(path, png_bytes(arr))


def imageref_from_file(path: str | Path, base_dir: str | Path) -> ImageRef:
    """Build a ref with verified dimensions; ``path`` is stored relative to ``base_dir``."""
    path = Path(path)
    arr = load_rgb(path)
    h, w = arr.shape[:2]
    if w < 1 or h < 1:
        raise ValueError(f"degenerate image {path}")
    rel = os.path.relpath(path, base_dir)
    return ImageRef(
        path=Path(rel).as_posix(),
        digest=sha256_file(path),
        width=w,
        height=h,
    )


def load_ref(ref: ImageRef, base_dir: str | Path, verify: bool = True) -> np.ndarray:
    """Load the pixels behind a ref, checking the content digest by default."""
    path = Path(base_dir) / ref.path
    data = path.read_bytes()
    if verify and ref.digest and sha256_bytes(data) != ref.digest:
        raise ValueError(f"digest mismatch for {path}")
    return from_png_bytes(data)


def mask_to_wire(mask: Mask) -> np.ndarray:
    return (mask.bits * 255).astype(np.uint8)


def mask_from_wire(raster: np.ndarray, width: int, height: int) -> Mask:
    """Binarize a single-channel wire raster: values >= 128 count as on."""
    if raster.ndim != 2:
        raise ValueError(f"wire mask must be single-channel, got shape {raster.shape}")
    if raster.shape != (height, width):
        raise ValueError(
            f"wire mask is {raster.shape[1]}x{raster.shape[0]}, expected {width}x{height}"
        )
    return Mask(width=width, height=height, bits=(raster >= 128).astype(np.uint8))


def save_mask(mask: Mask, path: str | Path) -> None:
    save_png(mask_to_wire(mask), path)


def load_mask(path: str | Path) -> Mask:
    raster = from_png_bytes(Path(path).read_bytes())
    if raster.ndim != 2:
        raise ValueError(f"mask file {path} is not single-channel")
    h, w = raster.shape
    return mask_from_wire(raster, w, h)
