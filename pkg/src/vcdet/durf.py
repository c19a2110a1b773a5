"""Dense grid sampling and the 64-dimensional SURF-like patch descriptor.

Each sampled point carries a square window of side 24s split into a 4x4 grid
of subregions. Haar responses of size 2s are evaluated at every pixel whose
wavelet support stays inside the window; each subregion accumulates
(sum dx, sum dy, sum |dx|, sum |dy|) and the 16 blocks concatenate to a
64-vector which is then L2-normalized. There is no orientation assignment
and no Gaussian weighting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import Descriptor, Keypoint
from .images import Image, IntegralImage, integral

DESCRIPTOR_DIM = 64


@dataclass(frozen=True)
class SamplingConfig:
    """Dense sampling geometry; everything derives from the scale ``s``."""

    s: int = 2

    def __post_init__(self):
        if self.s < 1:
            raise ValueError(f"scale must be >= 1, got {self.s}")

    @property
    def interval(self) -> int:
        return 6 * self.s

    @property
    def window(self) -> int:
        return 24 * self.s

    @property
    def wavelet_size(self) -> int:
        return 2 * self.s


def dense_grid(width: int, height: int, cfg: SamplingConfig) -> list[Keypoint]:
    """Grid centers spaced ``interval`` apart whose window fits in the image.

    Centers start at window/2 on each axis; an image smaller than the window
    yields an empty list. Output is row-major (y outer, x inner).
    """
    half = cfg.window // 2
    xs = range(half, width - half + 1, cfg.interval)
    ys = range(half, height - half + 1, cfg.interval)
    return [Keypoint(x=float(x), y=float(y), scale=float(cfg.s))
            for y in ys for x in xs]


class _HaarField:
    """Per-image Haar responses of one wavelet size, addressable by pixel.

    ``dx[py, px]``/``dy[py, px]`` hold the responses whose 2s x 2s support
    fits inside the image; other entries are zero and never read (the dense
    grid keeps windows, and hence all wavelet supports, in bounds).
    """

    def __init__(self, ii: IntegralImage, s: int):
        pad = ii.padded()
        h, w = ii.height, ii.width
        self.dx = np.zeros((h, w))
        self.dy = np.zeros((h, w))
        # Valid centers: px in [s, w-s], py in [s, h-s].
        if w - s >= s and h - s >= s:
            # Box sum over [x0..x1] x [y0..y1] = pad[y1+1, x1+1] - pad[y0, x1+1]
            #                                  - pad[y1+1, x0] + pad[y0, x0].
            def box(x0, y0, x1, y1):
                return (pad[y1 + 1:, x1 + 1:][: h - 2 * s + 1, : w - 2 * s + 1]
                        - pad[y0:, x1 + 1:][: h - 2 * s + 1, : w - 2 * s + 1]
                        - pad[y1 + 1:, x0:][: h - 2 * s + 1, : w - 2 * s + 1]
                        + pad[y0:, x0:][: h - 2 * s + 1, : w - 2 * s + 1])

            # Offsets relative to a center at (s, s): support [0..2s-1]^2.
            left = box(0, 0, s - 1, 2 * s - 1)
            right = box(s, 0, 2 * s - 1, 2 * s - 1)
            top = box(0, 0, 2 * s - 1, s - 1)
            bottom = box(0, s, 2 * s - 1, 2 * s - 1)
            self.dx[s: h - s + 1, s: w - s + 1] = right - left
            self.dy[s: h - s + 1, s: w - s + 1] = bottom - top
        self.abs_dx = np.abs(self.dx)
        self.abs_dy = np.abs(self.dy)


def _descriptor_from_field(field: _HaarField, kp: Keypoint, cfg: SamplingConfig,
                           width: int, height: int) -> Descriptor:
    s = cfg.s
    cx, cy = int(round(kp.x)), int(round(kp.y))
    half = cfg.window // 2
    if not (half <= cx <= width - half and half <= cy <= height - half):
        raise ValueError(f"window at ({kp.x},{kp.y}) exceeds {width}x{height} image")
    # Responses whose support fits in the window: offsets [s .. 23s] from the
    # window's top-left corner, i.e. 22s+1 positions per axis.
    y0, y1 = cy - 11 * s, cy + 11 * s
    x0, x1 = cx - 11 * s, cx + 11 * s
    # Subregion k spans window offsets [6sk, 6s(k+1)-1]; in slice coordinates
    # (which start at offset s) the segment starts are 0, 5s, 11s, 17s.
    starts = np.array([0, 5 * s, 11 * s, 17 * s])
    blocks = np.empty((4, 4, 4))
    for i, plane in enumerate((field.dx, field.dy, field.abs_dx, field.abs_dy)):
        win = plane[y0: y1 + 1, x0: x1 + 1]
        rows = np.add.reduceat(win, starts, axis=0)
        blocks[:, :, i] = np.add.reduceat(rows, starts, axis=1)
    vec = blocks.reshape(-1)
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec = vec / norm
    return Descriptor(vec)


def durf_descriptor(ii: IntegralImage, kp: Keypoint,
                    cfg: SamplingConfig) -> Descriptor:
    """Descriptor of a single keypoint; a constant patch yields the zero vector."""
    field = _HaarField(ii, cfg.s)
    return _descriptor_from_field(field, kp, cfg, ii.width, ii.height)


def extract_durf(img: Image, cfg: SamplingConfig = SamplingConfig()
                 ) -> list[tuple[Keypoint, Descriptor]]:
    """Dense grid + descriptor per grid point, in grid order; deterministic."""
    kps = dense_grid(img.width, img.height, cfg)
    if not kps:
        return []
    field = _HaarField(integral(img), cfg.s)
    return [(kp, _descriptor_from_field(field, kp, cfg, img.width, img.height))
            for kp in kps]
