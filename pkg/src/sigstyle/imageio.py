"""Image I/O and small raster utilities.

Images travel through the library as float tensors of shape (3, H, W) with
values in [0, 1]; files on disk are 8-bit RGB PNG.  Masks are 8-bit
grayscale PNG with white marking the region to stylize.
"""

from __future__ import annotations

import hashlib
import io
import logging
import os
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont

from .errors import ConfigurationError, DimensionError

log = logging.getLogger(__name__)

CAPTION_STRIP = 18


def to_tensor(image, dtype=torch.float64) -> torch.Tensor:
    """PIL image or HxWx3 uint8 array -> (3, H, W) tensor in [0, 1]."""
    if isinstance(image, torch.Tensor):
        return image.to(dtype)
    arr = np.asarray(image.convert("RGB") if isinstance(image, Image.Image) else image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 RGB array, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).to(dtype)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor in [0, 1] -> HxWx3 uint8, rounding to nearest."""
    arr = image.detach().to(torch.float64).clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def to_pil(image: torch.Tensor) -> Image.Image:
    return Image.fromarray(to_uint8(image), mode="RGB")


def load_rgb(path, dtype=torch.float64) -> torch.Tensor:
    with Image.open(path) as im:
        return to_tensor(im.convert("RGB"), dtype)


def save_png(image, path) -> None:
    """Write an RGB PNG without timestamps or other volatile chunks."""
    if isinstance(image, torch.Tensor):
        image = to_pil(image)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    image.save(path, format="PNG")


def png_bytes(image: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    to_pil(image).save(buf, format="PNG")
    return buf.getvalue()


def resize(image: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    """Bilinear, antialiased resize of a (C, H, W) tensor; identity if already sized."""
    hw = (size, size) if isinstance(size, int) else tuple(size)
    if tuple(image.shape[-2:]) == hw:
        return image
    out = F.interpolate(image[None], size=hw, mode="bilinear", align_corners=False, antialias=True)
    return out[0].clamp(0, 1)


def center_square(image: torch.Tensor) -> torch.Tensor:
    h, w = image.shape[-2:]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return image[..., top : top + s, left : left + s]


def prepare(image: torch.Tensor, size: int) -> torch.Tensor:
    """Center-crop to square and resize to the backbone's input size."""
    return resize(center_square(image), size)


def image_digest(image: torch.Tensor) -> str:
    """sha256 over the 8-bit pixels and shape; stable across file encodings."""
    arr = to_uint8(image)
    h = hashlib.sha256()
    h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
    h.update(arr.tobytes())
    return "sha256:" + h.hexdigest()


def load_mask(path, dtype=torch.float64) -> torch.Tensor:
    """Grayscale PNG -> (H, W) tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr).to(dtype)


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    mse = float(((a.to(torch.float64) - b.to(torch.float64)) ** 2).mean())
    return float("inf") if mse == 0 else 10.0 * np.log10(peak ** 2 / mse)


def emit_grid(
    images: Sequence[torch.Tensor],
    labels: Sequence[str] | None = None,
    path=None,
    cols: int | None = None,
) -> Image.Image:
    """Tile images row-major, each above a caption strip, and optionally save.

    Tiles are sized to the first image; others are resized with a warning.
    """
    if not images:
        raise ConfigurationError("grid needs at least one image")
    labels = list(labels) if labels is not None else [""] * len(images)
    if len(labels) != len(images):
        raise ConfigurationError(f"{len(labels)} labels for {len(images)} images")
    cols = cols or len(images)
    rows = -(-len(images) // cols)
    h, w = images[0].shape[-2:]
    tile_h = h + CAPTION_STRIP
    canvas = Image.new("RGB", (cols * w, rows * tile_h), "white")
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for i, (img, label) in enumerate(zip(images, labels)):
        if tuple(img.shape[-2:]) != (h, w):
            log.warning("grid tile %d is %s, resizing to %s", i, tuple(img.shape[-2:]), (h, w))
            img = resize(img, (h, w))
        r, c = divmod(i, cols)
        canvas.paste(to_pil(img), (c * w, r * tile_h))
        draw.text((c * w + 2, r * tile_h + h + 2), label, fill="black", font=font)
    if path is not None:
        save_png(canvas, path)
    return canvas
