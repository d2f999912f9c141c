"""Binary PPM (P6) and PGM (P5) images with maxval 255, plus heatmap overlays."""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError, ShapeError

_WHITESPACE = b" \t\n\r\x0b\x0c"


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Quantize reals in [0, 1] as round(255 * v), halves rounding up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def image_to_hwc(image: np.ndarray) -> np.ndarray:
    """(3, H, W) reals in [0, 1] -> (H, W, 3) uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {image.shape}")
    return to_uint8(np.transpose(image, (1, 2, 0)))


def hwc_to_image(pixels: np.ndarray) -> np.ndarray:
    return (np.transpose(pixels, (2, 0, 1)).astype(np.float64) / 255.0).astype(np.float32)


def _read_token(data: bytes, pos: int) -> tuple:
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos:pos + 1] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated header", start)
    return data[start:pos], pos


def decode_pnm(data: bytes) -> np.ndarray:
    """Parse a P5/P6 byte string. Returns (H, W) or (H, W, 3) uint8."""
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}", 0)
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"malformed header field {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError("image dimensions must be positive", pos)
    if maxval != 255:
        raise FormatError(f"maxval {maxval} is not supported (only 255)", pos)
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, found {len(payload)}", len(data))
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((height, width, 3) if channels == 3 else (height, width)).copy()


def encode_pnm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise FormatError("pixels must be uint8")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"cannot encode array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(pixels).tobytes()


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_pnm(path, pixels: np.ndarray) -> None:
    data = encode_pnm(pixels)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_ppm(path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 3:
        raise FormatError("expected a color (P6) image", 0)
    return arr


def read_pgm(path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise FormatError("expected a grayscale (P5) image", 0)
    return arr


write_ppm = write_pnm
write_pgm = write_pnm


def heat_colors(saliency: np.ndarray) -> np.ndarray:
    """Linear blue-to-red colormap: v -> (v, 0, 1 - v), shaped (3, H, W)."""
    s = np.clip(np.asarray(saliency, dtype=np.float64), 0.0, 1.0)
    return np.stack([s, np.zeros_like(s), 1.0 - s])


def overlay(image: np.ndarray, saliency: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the heat colormap of ``saliency`` (H, W) over ``image`` (3, H, W)."""
    image = np.asarray(image, dtype=np.float64)
    saliency = np.asarray(saliency, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1:] != saliency.shape:
        raise ShapeError(f"image {image.shape} and saliency {saliency.shape} do not match")
    return (1.0 - alpha) * image + alpha * heat_colors(saliency)
