from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .masks import BinaryMask

OVERLAY_COLOR = (255, 64, 0)
OVERLAY_ALPHA = 0.5
CONTOUR_COLOR = (0, 255, 0)


def contour(m: BinaryMask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask."""
    bits = m.bits
    padded = np.pad(bits, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return bits & ~interior


def overlay(image: np.ndarray, pred: BinaryMask, gt: BinaryMask | None = None) -> np.ndarray:
    out = image.astype(np.float64).copy()
    sel = pred.bits
    out[sel] = (1 - OVERLAY_ALPHA) * out[sel] + OVERLAY_ALPHA * np.asarray(OVERLAY_COLOR, dtype=np.float64)
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    if gt is not None:
        out[contour(gt)] = CONTOUR_COLOR
    return out


def draw_caption_strip(img: Image.Image, lines: list[str]) -> Image.Image:
    """Write the text lines on a darkened band along the bottom edge, in place."""
    font = ImageFont.load_default()
    draw = ImageDraw.Draw(img, "RGBA")
    line_h = 12
    band = min(img.height, line_h * len(lines) + 4)
    draw.rectangle([0, img.height - band, img.width, img.height], fill=(0, 0, 0, 160))
    y = img.height - band + 2
    for line in lines:
        draw.text((2, y), line, fill=(255, 255, 255, 255), font=font)
        y += line_h
    return img


def render_visualization(
    image: np.ndarray, pred: BinaryMask, gt: BinaryMask | None, captions: list[str], out_path: str | Path
) -> Path:
    img = Image.fromarray(overlay(image, pred, gt), "RGB")
    draw_caption_strip(img, captions)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    img.save(out_path, format="PNG")
    return out_path
