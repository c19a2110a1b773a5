"""Grayscale images, integral images, box sums, Haar responses and Gaussian blur.

Intensities live in [0, 1] as float64. All containers are frozen and wrap
read-only arrays, so shared instances are safe to use from multiple threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import correlate1d

# Rec. 601 luma weights for color -> gray conversion.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class PnmError(Exception):
    """Base error for PGM/PPM decoding problems."""


class PnmHeaderError(PnmError):
    """Malformed header (bad magic syntax, sizes, truncation, maxval != 255)."""


class UnsupportedPnmFormatError(PnmError):
    """File is a PNM variant outside P2/P3/P5/P6, or not PNM at all."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Image:
    """Grayscale raster; ``pixels`` is a read-only (height, width) array in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.ndim != 2:
            raise ValueError("pixels must be a 2-D array")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("intensities must be finite and lie in [0, 1]")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class IntegralImage:
    """Summed-area table: ``table[y, x]`` is the intensity sum over [0..x] x [0..y]."""

    table: np.ndarray

    def __post_init__(self):
        if not isinstance(self.table, np.ndarray) or self.table.ndim != 2:
            raise ValueError("table must be a 2-D array")
        object.__setattr__(self, "table", _freeze(self.table))

    @property
    def width(self) -> int:
        return self.table.shape[1]

    @property
    def height(self) -> int:
        return self.table.shape[0]

    def padded(self) -> np.ndarray:
        """Table with a zero row/column prepended; handy for corner lookups."""
        return np.pad(self.table, ((1, 0), (1, 0)))


class HaarResponse(NamedTuple):
    dx: float
    dy: float


def _read_pnm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last one.
    """
    tokens: list[bytes] = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise PnmHeaderError("truncated header")
        tokens.append(buf[start:i])
        if len(tokens) == count:
            if i >= n:
                raise PnmHeaderError("missing data after header")
            i += 1  # exactly one whitespace byte separates header from raster
    return tokens, i


def load_image(path) -> Image:
    """Load a PGM (P2/P5) or PPM (P3/P6) file as a grayscale image.

    8-bit samples are scaled to [0, 1]; color pixels are reduced with the
    0.299/0.587/0.114 luma weights. Only maxval 255 is accepted.
    """
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 2:
        raise UnsupportedPnmFormatError(f"{path}: not a PNM file")
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise UnsupportedPnmFormatError(f"{path}: unsupported format {magic!r}")
    ascii_mode = magic in (b"P2", b"P3")
    color = magic in (b"P3", b"P6")
    try:
        (w_tok, h_tok, maxval_tok), offset = _read_pnm_tokens(buf[2:], 3)
        width, height, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    except PnmHeaderError:
        raise
    except ValueError as exc:
        raise PnmHeaderError(f"{path}: non-numeric header field") from exc
    if width < 1 or height < 1:
        raise PnmHeaderError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PnmHeaderError(f"{path}: only maxval 255 is supported, got {maxval}")
    n_samples = width * height * (3 if color else 1)
    body = buf[2 + offset :]
    if ascii_mode:
        fields = body.split()
        if len(fields) < n_samples:
            raise PnmHeaderError(f"{path}: expected {n_samples} samples, found {len(fields)}")
        try:
            samples = np.array(fields[:n_samples], dtype=np.float64)
        except ValueError as exc:
            raise PnmHeaderError(f"{path}: non-numeric sample") from exc
        if samples.min() < 0 or samples.max() > 255:
            raise PnmHeaderError(f"{path}: sample out of range")
    else:
        if len(body) < n_samples:
            raise PnmHeaderError(f"{path}: expected {n_samples} bytes, found {len(body)}")
        samples = np.frombuffer(body[:n_samples], dtype=np.uint8).astype(np.float64)
    samples /= 255.0
    if color:
        rgb = samples.reshape(height, width, 3)
        gray = rgb @ np.array(LUMA_WEIGHTS)
        gray = np.clip(gray, 0.0, 1.0)
    else:
        gray = samples.reshape(height, width)
    return Image(gray)


def save_pgm(img: Image, path) -> None:
    """Write a binary (P5) PGM; debugging aid, round-trips 8-bit content."""
    data = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def integral(img: Image) -> IntegralImage:
    """Summed-area table of the image in double precision."""
    table = np.cumsum(np.cumsum(img.pixels, axis=0), axis=1)
    return IntegralImage(table)


def box_sum(ii: IntegralImage, x0: int, y0: int, x1: int, y1: int) -> float:
    """Intensity sum over the inclusive rectangle [x0..x1] x [y0..y1]."""
    if not (0 <= x0 <= x1 < ii.width and 0 <= y0 <= y1 < ii.height):
        raise ValueError(f"rectangle ({x0},{y0})-({x1},{y1}) out of bounds "
                         f"for {ii.width}x{ii.height}")
    t = ii.table
    total = t[y1, x1]
    if x0 > 0:
        total -= t[y1, x0 - 1]
    if y0 > 0:
        total -= t[y0 - 1, x1]
    if x0 > 0 and y0 > 0:
        total += t[y0 - 1, x0 - 1]
    return float(total)


def haar_response(ii: IntegralImage, cx: int, cy: int, size: int) -> HaarResponse:
    """Haar wavelet responses of an even-size square centered at (cx, cy).

    The support covers columns [cx-size/2, cx+size/2-1] and the same rows
    around cy. dx is right half minus left half, dy bottom minus top.
    """
    if size < 2 or size % 2 != 0:
        raise ValueError(f"wavelet size must be even and positive, got {size}")
    h = size // 2
    x0, x1 = cx - h, cx + h - 1
    y0, y1 = cy - h, cy + h - 1
    if not (0 <= x0 and x1 < ii.width and 0 <= y0 and y1 < ii.height):
        raise ValueError(f"wavelet support at ({cx},{cy}) size {size} exceeds "
                         f"{ii.width}x{ii.height} image")
    left = box_sum(ii, x0, y0, cx - 1, y1)
    right = box_sum(ii, cx, y0, x1, y1)
    top = box_sum(ii, x0, y0, x1, cy - 1)
    bottom = box_sum(ii, x0, cy, x1, y1)
    return HaarResponse(dx=right - left, dy=bottom - top)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian of radius ceil(3*sigma), normalized to unit sum."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def blur_array(pixels: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a raw array, clamping at the borders."""
    k = gaussian_kernel(sigma)
    out = correlate1d(pixels, k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def gaussian_blur(img: Image, sigma: float) -> Image:
    """Gaussian blur with a unit-sum kernel; output intensities stay in [0, 1]."""
    out = blur_array(img.pixels, sigma)
    return Image(np.clip(out, 0.0, 1.0))
