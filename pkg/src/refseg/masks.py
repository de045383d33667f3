"""Binary masks, COCO uncompressed RLE, geometry, IoU and instance rendering.

Masks are stored as ``(height, width)`` boolean arrays. RLE counts follow the
COCO convention: column-major scan, the first run counts background pixels.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import CountsMismatch, DimensionMismatch, EmptyMask

STRATEGY_TAGS = ("MB", "MC")


class BinaryMask:
    """Immutable pixel-exact mask."""

    __slots__ = ("_bits",)

    def __init__(self, bits: NDArray) -> None:
        arr = np.array(bits, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise DimensionMismatch(f"mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionMismatch(f"mask dimensions must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        self._bits = arr

    @classmethod
    def zeros(cls, width: int, height: int) -> BinaryMask:
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def bits(self) -> NDArray[np.bool_]:
        return self._bits

    @property
    def width(self) -> int:
        return int(self._bits.shape[1])

    @property
    def height(self) -> int:
        return int(self._bits.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def area(self) -> int:
        return int(np.count_nonzero(self._bits))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._bits, other._bits))

    def __hash__(self) -> int:
        return hash((self.shape, self._bits.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask({self.width}x{self.height}, area={self.area()})"


@dataclass(frozen=True)
class RleCounts:
    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    def problems(self) -> list[str]:
        """Invariant violations, empty when the record is well formed."""
        out = []
        if self.width < 1 or self.height < 1:
            out.append(f"dimensions must be >= 1, got {self.width}x{self.height}")
        if any(c < 0 for c in self.counts):
            out.append("negative run length")
        total = sum(self.counts)
        if total != self.width * self.height:
            out.append(f"sum(counts)={total} != width*height={self.width * self.height}")
        for i in range(1, len(self.counts) - 1):
            if self.counts[i] == 0 and self.counts[i + 1] == 0:
                out.append(f"consecutive zero runs at {i}")
                break
        return out

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, d: dict) -> RleCounts:
        return cls(int(d["width"]), int(d["height"]), tuple(d["counts"]))


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel box."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x_min, self.y_min, self.x_max, self.y_max


def rle_decode(r: RleCounts) -> BinaryMask:
    counts = np.asarray(r.counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise CountsMismatch("negative run length")
    total = int(counts.sum())
    if total != r.width * r.height:
        raise CountsMismatch(
            f"sum(counts)={total} does not match {r.width}x{r.height}={r.width * r.height}"
        )
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return BinaryMask(flat.reshape((r.height, r.width), order="F"))


def rle_encode(m: BinaryMask) -> RleCounts:
    flat = m.bits.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleCounts(m.width, m.height, tuple(runs))


def tight_bbox(m: BinaryMask) -> BoundingBox:
    cols = np.flatnonzero(m.bits.any(axis=0))
    if cols.size == 0:
        raise EmptyMask("mask has no foreground pixel")
    rows = np.flatnonzero(m.bits.any(axis=1))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def intersection_union(a: BinaryMask, b: BinaryMask) -> tuple[int, int]:
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    return inter, union


def ratio(inter: int, union: int) -> float:
    # union == 0 means both masks are empty: treated as agreement.
    if union == 0:
        return 1.0
    return inter / union


def iou(a: BinaryMask, b: BinaryMask) -> float:
    return ratio(*intersection_union(a, b))


# ---------------------------------------------------------------- rendering


@dataclass(frozen=True)
class RenderConfig:
    fill_color: tuple[int, int, int] = (127, 127, 127)
    crop_pad_ratio: float = 0.1
    blur_sigma: float = 10.0
    encoder_resolution: int = 224

    def __post_init__(self) -> None:
        object.__setattr__(self, "fill_color", tuple(int(c) for c in self.fill_color))
        if len(self.fill_color) != 3 or not all(0 <= c <= 255 for c in self.fill_color):
            raise ValueError(f"fill_color must be three 8-bit values, got {self.fill_color}")
        if self.crop_pad_ratio < 0 or self.blur_sigma < 0:
            raise ValueError("crop_pad_ratio and blur_sigma must be non-negative")
        if self.encoder_resolution < 1:
            raise ValueError("encoder_resolution must be >= 1")

    def to_json(self) -> dict:
        return {
            "fill_color": list(self.fill_color),
            "crop_pad_ratio": self.crop_pad_ratio,
            "blur_sigma": self.blur_sigma,
            "encoder_resolution": self.encoder_resolution,
        }


@dataclass(frozen=True, eq=False)
class InstanceImage:
    pixels: NDArray[np.uint8]
    strategy_tag: str
    _digest: str = field(default="", repr=False)

    def __post_init__(self) -> None:
        if self.strategy_tag not in STRATEGY_TAGS:
            raise ValueError(f"unknown strategy tag {self.strategy_tag!r}")
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"instance image must be HxWx3, got {px.shape}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        h = hashlib.sha256()
        h.update(f"{self.strategy_tag}:{px.shape[0]}x{px.shape[1]}:".encode())
        h.update(px.tobytes())
        object.__setattr__(self, "_digest", h.hexdigest())

    @property
    def digest(self) -> str:
        """sha256 over strategy tag, shape and raw pixel bytes."""
        return self._digest

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.pixels.shape[0]), int(self.pixels.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InstanceImage):
            return NotImplemented
        return self._digest == other._digest


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _to_uint8(x: NDArray) -> NDArray[np.uint8]:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def _check_image(image: NDArray, m: BinaryMask) -> NDArray[np.uint8]:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatch(f"image must be HxWx3, got {img.shape}")
    if img.shape[:2] != m.shape:
        raise DimensionMismatch(f"image {img.shape[:2]} and mask {m.shape} differ")
    return img.astype(np.uint8, copy=False)


def crop_window(m: BinaryMask, pad_ratio: float) -> BoundingBox:
    """Tight box grown by round(ratio * longest side) per edge, clamped to the image."""
    box = tight_bbox(m)
    pad = _round_half_up(pad_ratio * max(box.width, box.height))
    return BoundingBox(
        max(0, box.x_min - pad),
        max(0, box.y_min - pad),
        min(m.width - 1, box.x_max + pad),
        min(m.height - 1, box.y_max + pad),
    )


def pad_to_square(pixels: NDArray[np.uint8], fill: Sequence[int]) -> NDArray[np.uint8]:
    h, w = pixels.shape[:2]
    side = max(h, w)
    out = np.empty((side, side, 3), dtype=np.uint8)
    out[:] = np.asarray(fill, dtype=np.uint8)
    top = (side - h) // 2
    left = (side - w) // 2
    out[top : top + h, left : left + w] = pixels
    return out


def _resize_axis_weights(n_src: int, n_dst: int):
    # half-pixel centers, edge-clamped sample positions
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = pos - i0
    return i0, i1, frac


def resize_bilinear(pixels: NDArray[np.uint8], height: int, width: int) -> NDArray[np.uint8]:
    src = pixels.astype(np.float64)
    h, w = src.shape[:2]
    if (h, w) == (height, width):
        return pixels.astype(np.uint8, copy=True)
    r0, r1, rf = _resize_axis_weights(h, height)
    rows = src[r0] * (1.0 - rf)[:, None, None] + src[r1] * rf[:, None, None]
    c0, c1, cf = _resize_axis_weights(w, width)
    out = rows[:, c0] * (1.0 - cf)[None, :, None] + rows[:, c1] * cf[None, :, None]
    return _to_uint8(out)


def gaussian_kernel(sigma: float) -> NDArray[np.float64]:
    if sigma <= 0:
        return np.ones(1)
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(pixels: NDArray[np.uint8], sigma: float) -> NDArray[np.uint8]:
    """Separable Gaussian blur, radius ceil(3 sigma), edge-clamped borders."""
    kernel = gaussian_kernel(sigma)
    if kernel.size == 1:
        return pixels.astype(np.uint8, copy=True)
    r = kernel.size // 2
    src = pixels.astype(np.float64)
    h, w = src.shape[:2]

    padded = np.pad(src, ((r, r), (0, 0), (0, 0)), mode="edge")
    tmp = np.zeros_like(src)
    for k, wk in enumerate(kernel):
        tmp += wk * padded[k : k + h]

    padded = np.pad(tmp, ((0, 0), (r, r), (0, 0)), mode="edge")
    out = np.zeros_like(src)
    for k, wk in enumerate(kernel):
        out += wk * padded[:, k : k + w]
    return _to_uint8(out)


def mc_canvas(image: NDArray, m: BinaryMask, cfg: RenderConfig) -> NDArray[np.uint8]:
    """Mask-and-crop before resizing: fill background, crop, pad to square."""
    img = _check_image(image, m)
    box = crop_window(m, cfg.crop_pad_ratio)
    filled = img.copy()
    filled[~m.bits] = np.asarray(cfg.fill_color, dtype=np.uint8)
    crop = filled[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1]
    return pad_to_square(crop, cfg.fill_color)


def mb_canvas(image: NDArray, m: BinaryMask, cfg: RenderConfig) -> NDArray[np.uint8]:
    """Mask-and-blur before resizing: background replaced by a blurred copy."""
    img = _check_image(image, m)
    if m.area() == 0:
        raise EmptyMask("cannot render an empty proposal")
    if m.area() == m.width * m.height:
        out = img.copy()
    else:
        blurred = gaussian_blur(img, cfg.blur_sigma)
        out = np.where(m.bits[:, :, None], img, blurred).astype(np.uint8)
    return pad_to_square(out, cfg.fill_color)


def render_mc(image: NDArray, m: BinaryMask, cfg: RenderConfig) -> InstanceImage:
    canvas = mc_canvas(image, m, cfg)
    res = cfg.encoder_resolution
    return InstanceImage(resize_bilinear(canvas, res, res), "MC")


def render_mb(image: NDArray, m: BinaryMask, cfg: RenderConfig) -> InstanceImage:
    canvas = mb_canvas(image, m, cfg)
    res = cfg.encoder_resolution
    return InstanceImage(resize_bilinear(canvas, res, res), "MB")
