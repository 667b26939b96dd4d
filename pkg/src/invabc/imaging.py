"""Colour conversion, working-region masking, objective-image reconstruction, SSIM and PNG I/O.

Images are ``(H, W, 3)`` uint8 arrays. HSV uses the hexcone model with hue in
degrees ``[0, 360)`` and saturation/value in ``[0, 1]``.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WHITE = np.array([255, 255, 255], dtype=np.uint8)


# ---------------------------------------------------------------------------
# colour space


def rgb_to_hsv(rgb) -> np.ndarray:
    """Vectorised hexcone conversion; the last axis holds (R, G, B) in 0..255."""
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        v == r,
        ((g - b) / safe_c) % 6.0,
        np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
    )
    h = np.where(c > 0, 60.0 * h, 0.0) % 360.0
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 360.0, hsv[..., 1], hsv[..., 2]
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    sector = np.floor(hp).astype(int) % 6
    zeros = np.zeros_like(c)
    table = [(c, x, zeros), (x, c, zeros), (zeros, c, x), (zeros, x, c), (x, zeros, c), (c, zeros, x)]
    out = np.zeros(hsv.shape, dtype=np.float64)
    for k, (rr, gg, bb) in enumerate(table):
        sel = sector == k
        out[..., 0] = np.where(sel, rr, out[..., 0])
        out[..., 1] = np.where(sel, gg, out[..., 1])
        out[..., 2] = np.where(sel, bb, out[..., 2])
    out += (v - c)[..., None]
    return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class HsvBounds:
    low: tuple[float, float, float]
    high: tuple[float, float, float] = (360.0, 1.0, 1.0)

    def contains(self, hsv: np.ndarray) -> np.ndarray:
        """Inclusive membership; a hue interval with ``low.h > high.h`` wraps through 0."""
        h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
        lh, ls, lv = self.low
        uh, us, uv = self.high
        if lh <= uh:
            hue_ok = (h >= lh) & (h <= uh)
        else:
            hue_ok = (h >= lh) | (h <= uh)
        return hue_ok & (s >= ls) & (s <= us) & (v >= lv) & (v <= uv)


DEFAULT_GREEN = HsvBounds((90.0, 0.3, 0.3), (150.0, 1.0, 1.0))


# ---------------------------------------------------------------------------
# working-region segmentation


def build_mask(punch_image, color_low) -> np.ndarray:
    """Black where every HSV channel strictly exceeds ``color_low``, white elsewhere."""
    low = color_low.low if isinstance(color_low, HsvBounds) else tuple(color_low)
    hsv = rgb_to_hsv(punch_image)
    inside = (hsv[..., 0] > low[0]) & (hsv[..., 1] > low[1]) & (hsv[..., 2] > low[2])
    if not inside.any():
        warnings.warn("mask has an empty working region: no pixel exceeds color_low", stacklevel=2)
    mask = np.empty(hsv.shape, dtype=np.uint8)
    mask[...] = hsv_to_rgb(np.array([0.0, 0.0, 1.0]))
    mask[inside] = hsv_to_rgb(np.array([0.0, 0.0, 0.0]))
    return mask


def color_low_from_region(image, region: np.ndarray, margin: float = 1e-6) -> tuple[float, float, float]:
    """Minimum HSV of the pixels under ``region``, lowered by ``margin`` for the strict test."""
    hsv = rgb_to_hsv(image)[region]
    if hsv.size == 0:
        raise ValueError("region selects no pixels")
    lo = hsv.min(axis=0) - margin
    return (float(lo[0]), float(lo[1]), float(lo[2]))


def apply_mask(fld, mask) -> np.ndarray:
    """Saturating per-channel sum of an FLD image and its mask."""
    fld = np.asarray(fld)
    mask = np.asarray(mask)
    if fld.shape != mask.shape:
        raise ValueError(f"FLD shape {fld.shape} != mask shape {mask.shape}")
    return np.minimum(fld.astype(np.int32) + mask.astype(np.int32), 255).astype(np.uint8)


@dataclass
class ObjectiveImage:
    image: np.ndarray
    non_green: int

    @property
    def green_fraction(self) -> float:
        h, w = self.image.shape[:2]
        return 1.0 - self.non_green / (h * w)


def green_mask(image, green: HsvBounds = DEFAULT_GREEN) -> np.ndarray:
    return green.contains(rgb_to_hsv(image))


def reconstruct_objective(flds, green: HsvBounds = DEFAULT_GREEN) -> ObjectiveImage:
    """Fill non-green pixels of the first image with the first green pixel found later in the list."""
    flds = [np.asarray(f) for f in flds]
    if not flds:
        raise ValueError("need at least one processed FLD image")
    acc = flds[0].copy()
    acc_green = green_mask(acc, green)
    for img in flds[1:]:
        if img.shape != acc.shape:
            raise ValueError(f"image shape {img.shape} != {acc.shape}")
        take = ~acc_green & green_mask(img, green)
        acc[take] = img[take]
        acc_green |= take
    return ObjectiveImage(acc, int((~acc_green).sum()))


# ---------------------------------------------------------------------------
# SSIM


@dataclass(frozen=True)
class SsimParams:
    c1: float = 0.01**2
    c2: float = 0.03**2
    c3: float | None = None  # defaults to c2 / 2
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    @property
    def c3_value(self) -> float:
        return 0.5 * self.c2 if self.c3 is None else self.c3

    @property
    def simplified(self) -> bool:
        return self.alpha == self.beta == self.gamma == 1.0 and self.c3_value == 0.5 * self.c2


def luminance(image) -> np.ndarray:
    """Luma plane in [0, 1]. 2-D float input is taken as luminance already."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        return arr.astype(np.float64) / (255.0 if arr.dtype == np.uint8 else 1.0)
    x = arr.astype(np.float64)
    if arr.dtype == np.uint8:
        x = x / 255.0
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


def ssim(x, y, params: SsimParams = SsimParams()) -> float:
    """Single global SSIM over the luminance planes of ``x`` and ``y``."""
    if np.shape(x) != np.shape(y):
        raise ValueError(f"image shapes differ: {np.shape(x)} vs {np.shape(y)}")
    lx, ly = luminance(x).ravel(), luminance(y).ravel()
    ux, uy = lx.mean(), ly.mean()
    dx, dy = lx - ux, ly - uy
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    cov = np.mean(dx * dy)
    c1, c2 = params.c1, params.c2
    if params.simplified:
        return float((2 * ux * uy + c1) * (2 * cov + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2)))
    sx, sy = np.sqrt(vx), np.sqrt(vy)
    c3 = params.c3_value
    lum = (2 * ux * uy + c1) / (ux * ux + uy * uy + c1)
    con = (2 * sx * sy + c2) / (vx + vy + c2)
    st = (cov + c3) / (sx * sy + c3)
    return float(lum**params.alpha * con**params.beta * st**params.gamma)


# ---------------------------------------------------------------------------
# PNG


PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}


class PngError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)


def encode_png(image) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    raw = np.zeros((h, 1 + 3 * w), dtype=np.uint8)
    raw[:, 1:] = img.reshape(h, 3 * w)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (
        PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(raw.tobytes(), 9))
        + _chunk(b"IEND", b"")
    )


def save_png(image, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_png(image))


def _unfilter(data: bytes, h: int, stride: int, bpp: int, offset: int) -> np.ndarray:
    if len(data) != h * (stride + 1):
        raise PngError(f"decompressed image data has {len(data)} bytes, expected {h * (stride + 1)}", offset)
    rows = np.frombuffer(data, dtype=np.uint8).reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(h):
        ftype = rows[y, 0]
        line = rows[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            for i in range(bpp, stride):
                cur[i] = (cur[i] + cur[i - bpp]) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 3:
            cur = line.copy()
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                cur[i] = (cur[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:
            cur = line.copy()
            for i in range(stride):
                a = cur[i - bpp] if i >= bpp else 0
                b = prev[i]
                c = prev[i - bpp] if i >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                cur[i] = (cur[i] + pred) & 0xFF
        else:
            raise PngError(f"unknown filter type {ftype} on row {y}", offset)
        out[y] = cur
        prev = cur
    return out


def decode_png(raw: bytes) -> np.ndarray:
    """Decode a non-interlaced 8-bit PNG to RGB; alpha is dropped, grey is replicated."""
    if not raw.startswith(PNG_SIGNATURE):
        raise PngError("missing PNG signature", 0)
    pos = len(PNG_SIGNATURE)
    header = None
    palette = None
    idat = []
    idat_offset = None
    seen_end = False
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise PngError("truncated chunk header", pos)
        length, tag = struct.unpack_from(">I4s", raw, pos)
        start = pos + 8
        end = start + length
        if end + 4 > len(raw):
            raise PngError(f"truncated {tag!r} chunk", pos)
        data = raw[start:end]
        (crc,) = struct.unpack_from(">I", raw, end)
        if zlib.crc32(tag + data) & 0xFFFFFFFF != crc:
            raise PngError(f"CRC mismatch in {tag!r} chunk", end)
        if tag == b"IHDR":
            if length != 13:
                raise PngError("IHDR must be 13 bytes", pos)
            header = struct.unpack(">IIBBBBB", data)
            w, h, depth, ctype, comp, filt, interlace = header
            if depth != 8:
                raise PngError(f"unsupported bit depth {depth}", start + 8)
            if ctype not in _CHANNELS:
                raise PngError(f"unsupported colour type {ctype}", start + 9)
            if comp != 0 or filt != 0:
                raise PngError("unsupported compression/filter method", start + 10)
            if interlace != 0:
                raise PngError("interlaced PNG not supported", start + 12)
        elif header is None:
            raise PngError(f"{tag!r} chunk before IHDR", pos)
        elif tag == b"PLTE":
            if length % 3:
                raise PngError("PLTE length not a multiple of 3", pos)
            palette = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
        elif tag == b"IDAT":
            if idat_offset is None:
                idat_offset = start
            idat.append(data)
        elif tag == b"IEND":
            seen_end = True
            break
        pos = end + 4
    if header is None:
        raise PngError("no IHDR chunk", len(PNG_SIGNATURE))
    if not idat:
        raise PngError("no IDAT chunk", pos)
    if not seen_end:
        raise PngError("missing IEND chunk", len(raw))
    w, h, _, ctype, *_ = header
    try:
        data = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise PngError(f"corrupt image data: {exc}", idat_offset) from exc
    ch = _CHANNELS[ctype]
    px = _unfilter(data, h, w * ch, ch, idat_offset).reshape(h, w, ch)
    if ctype == 3:
        if palette is None:
            raise PngError("palette image without PLTE", idat_offset)
        if px.max(initial=0) >= len(palette):
            raise PngError("palette index out of range", idat_offset)
        return palette[px[..., 0]].copy()
    if ch in (1, 2):
        return np.repeat(px[..., :1], 3, axis=2)
    return px[..., :3].copy()


def load_png(path) -> np.ndarray:
    return decode_png(Path(path).read_bytes())
