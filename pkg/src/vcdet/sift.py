"""Difference-of-Gaussians keypoint detection and the 128-d gradient descriptor.

Detection follows the classic recipe: an octave pyramid of incrementally
blurred images, strict 26-neighbor extrema of adjacent-layer differences,
iterative quadratic sub-voxel refinement, then contrast and edge-curvature
rejection. Descriptors are 4x4 spatial x 8 orientation histograms with
trilinear interpolation, rotated to the dominant gradient orientation(s).
The input image is never upsampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from .features import Descriptor, Keypoint
from .images import Image, blur_array

DESCRIPTOR_DIM = 128
_N_SPATIAL_BINS = 4
_N_ORI_BINS = 8
_MIN_IMAGE_SIZE = 32
_MIN_OCTAVE_SIZE = 16


@dataclass(frozen=True)
class SiftParams:
    sigma0: float = 1.6
    intervals: int = 3
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    n_orientation_bins: int = 36
    orientation_sigma_factor: float = 1.5
    orientation_peak_ratio: float = 0.8
    descriptor_clamp: float = 0.2
    max_refine_iters: int = 5

    def __post_init__(self):
        if self.sigma0 <= 0 or self.contrast_threshold <= 0 or self.edge_ratio <= 0:
            raise ValueError("sigma0, contrast_threshold and edge_ratio must be positive")
        if self.intervals < 2:
            raise ValueError("at least 2 intervals per octave are required")


@dataclass(frozen=True)
class ScaleSpace:
    """Gaussian octave stacks, their adjacent differences, and scale metadata."""

    octaves: list[np.ndarray] = field(repr=False)   # (S+3, H, W) per octave
    dog: list[np.ndarray] = field(repr=False)       # (S+2, H, W) per octave
    layer_sigmas: np.ndarray = field(repr=False)    # (n_octaves, S+3), input-pixel units
    params: SiftParams = SiftParams()

    @property
    def n_octaves(self) -> int:
        return len(self.octaves)

    def delta(self, octave: int) -> float:
        """Sampling step of an octave in input pixels."""
        return float(2 ** octave)


def build_scale_space(img: Image, p: SiftParams = SiftParams()) -> ScaleSpace:
    """S+3 blurred layers per octave; halve resolution until a side drops below 16.

    Layer (o, i) carries blur sigma0 * 2^(o + i/S) in input-pixel units; the
    input is treated as unblurred and layer (0, 0) is an explicit sigma0 blur.
    """
    if min(img.width, img.height) < _MIN_IMAGE_SIZE:
        raise ValueError(f"image must be at least {_MIN_IMAGE_SIZE} pixels per side")
    s_count = p.intervals + 3
    oct_sigmas = p.sigma0 * np.power(2.0, np.arange(s_count) / p.intervals)
    incremental = np.sqrt(oct_sigmas[1:] ** 2 - oct_sigmas[:-1] ** 2)

    octaves, dogs, sigmas = [], [], []
    base = blur_array(img.pixels, p.sigma0)
    o = 0
    while min(base.shape) >= _MIN_OCTAVE_SIZE:
        stack = np.empty((s_count,) + base.shape)
        stack[0] = base
        for i in range(1, s_count):
            stack[i] = blur_array(stack[i - 1], incremental[i - 1])
        octaves.append(stack)
        dogs.append(np.diff(stack, axis=0))
        sigmas.append(oct_sigmas * 2.0 ** o)
        base = stack[p.intervals][::2, ::2]
        o += 1
    return ScaleSpace(octaves=octaves, dog=dogs,
                      layer_sigmas=np.array(sigmas), params=p)


def _strict_extrema(d: np.ndarray, prefilter: float) -> np.ndarray:
    """(n, 3) integer (layer, y, x) voxels strictly above/below all 26 neighbors."""
    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    hi = maximum_filter(d, footprint=footprint, mode="constant", cval=-np.inf)
    lo = minimum_filter(d, footprint=footprint, mode="constant", cval=np.inf)
    cand = ((d > hi) | (d < lo)) & (np.abs(d) > prefilter)
    cand[0] = cand[-1] = False
    cand[:, :1, :] = cand[:, -1:, :] = False
    cand[:, :, :1] = cand[:, :, -1:] = False
    return np.argwhere(cand)


def _gradient_at(d: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, ...]:
    l, y, x = k[:, 0], k[:, 1], k[:, 2]
    g0 = 0.5 * (d[l + 1, y, x] - d[l - 1, y, x])
    g1 = 0.5 * (d[l, y + 1, x] - d[l, y - 1, x])
    g2 = 0.5 * (d[l, y, x + 1] - d[l, y, x - 1])
    return g0, g1, g2


def _hessian_at(d: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, ...]:
    l, y, x = k[:, 0], k[:, 1], k[:, 2]
    c2 = 2.0 * d[l, y, x]
    h00 = d[l + 1, y, x] + d[l - 1, y, x] - c2
    h11 = d[l, y + 1, x] + d[l, y - 1, x] - c2
    h22 = d[l, y, x + 1] + d[l, y, x - 1] - c2
    h01 = 0.25 * (d[l + 1, y + 1, x] - d[l + 1, y - 1, x]
                  - d[l - 1, y + 1, x] + d[l - 1, y - 1, x])
    h02 = 0.25 * (d[l + 1, y, x + 1] - d[l + 1, y, x - 1]
                  - d[l - 1, y, x + 1] + d[l - 1, y, x - 1])
    h12 = 0.25 * (d[l, y + 1, x + 1] - d[l, y + 1, x - 1]
                  - d[l, y - 1, x + 1] + d[l, y - 1, x - 1])
    return h00, h11, h22, h01, h02, h12


def _solve_offsets(grad, hess) -> np.ndarray:
    """Vectorized solve of H * off = -g via the adjugate; singular -> inf."""
    h00, h11, h22, h01, h02, h12 = hess
    g0, g1, g2 = grad
    det = (h00 * h11 * h22 + 2.0 * h01 * h02 * h12
           - h00 * h12 * h12 - h11 * h02 * h02 - h22 * h01 * h01)
    with np.errstate(divide="ignore", invalid="ignore"):
        a00 = (h11 * h22 - h12 * h12) / det
        a01 = (h02 * h12 - h01 * h22) / det
        a02 = (h01 * h12 - h02 * h11) / det
        a11 = (h00 * h22 - h02 * h02) / det
        a12 = (h01 * h02 - h00 * h12) / det
        a22 = (h00 * h11 - h01 * h01) / det
    off0 = -(a00 * g0 + a01 * g1 + a02 * g2)
    off1 = -(a01 * g0 + a11 * g1 + a12 * g2)
    off2 = -(a02 * g0 + a12 * g1 + a22 * g2)
    return np.stack([off0, off1, off2], axis=-1)


def detect_keypoints(ss: ScaleSpace, p: SiftParams | None = None) -> list[Keypoint]:
    """Refined DoG extrema passing the contrast and edge-ratio tests.

    Coordinates and scales are reported in input-image units; ``response``
    is the magnitude of the interpolated DoG value.
    """
    p = p or ss.params
    edge_bound = (p.edge_ratio + 1.0) ** 2 / p.edge_ratio
    found = []
    for o, d in enumerate(ss.dog):
        n_layers, h, w = d.shape
        keys = _strict_extrema(d, 0.5 * p.contrast_threshold)
        if keys.size == 0:
            continue
        off = np.zeros(keys.shape, dtype=np.float64)
        alive = np.ones(len(keys), dtype=bool)
        for it in range(p.max_refine_iters):
            grad = _gradient_at(d, keys)
            off = _solve_offsets(grad, _hessian_at(d, keys))
            off[~np.isfinite(off).all(axis=1)] = np.inf
            needs_move = (np.abs(off) > 0.5).any(axis=1) & np.isfinite(off).all(axis=1)
            if it == p.max_refine_iters - 1 or not needs_move.any():
                break
            step = np.clip(np.rint(off), -1, 1).astype(np.int64)
            keys[needs_move] += step[needs_move]
            inside = ((keys[:, 0] >= 1) & (keys[:, 0] <= n_layers - 2)
                      & (keys[:, 1] >= 1) & (keys[:, 1] <= h - 2)
                      & (keys[:, 2] >= 1) & (keys[:, 2] <= w - 2))
            alive &= inside
            keys[:, 0] = np.clip(keys[:, 0], 1, n_layers - 2)
            keys[:, 1] = np.clip(keys[:, 1], 1, h - 2)
            keys[:, 2] = np.clip(keys[:, 2], 1, w - 2)
        grad = _gradient_at(d, keys)
        converged = alive & np.isfinite(off).all(axis=1) & (np.abs(off) <= 0.5).all(axis=1)
        refined = (d[keys[:, 0], keys[:, 1], keys[:, 2]]
                   + 0.5 * (grad[0] * off[:, 0] + grad[1] * off[:, 1]
                            + grad[2] * off[:, 2]))
        keep = converged & (np.abs(refined) >= p.contrast_threshold)

        h00, h11, h22, h01, h02, h12 = _hessian_at(d, keys)
        tr = h11 + h22
        det2 = h11 * h22 - h12 * h12
        with np.errstate(divide="ignore", invalid="ignore"):
            edgeness = tr * tr / det2
        keep &= (det2 > 0) & (edgeness < edge_bound)

        delta = ss.delta(o)
        for idx in np.nonzero(keep)[0]:
            l, y, x = keys[idx]
            sigma = p.sigma0 * 2.0 ** (o + (l + off[idx, 0]) / p.intervals)
            found.append(Keypoint(
                x=float((x + off[idx, 2]) * delta),
                y=float((y + off[idx, 1]) * delta),
                scale=float(sigma),
                orientation=0.0,
                response=float(abs(refined[idx])),
            ))
    return found


class _GradientCache:
    """Per (octave, layer) gradient magnitude and angle arrays."""

    def __init__(self, ss: ScaleSpace):
        self.ss = ss
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def get(self, octave: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        key = (octave, layer)
        if key not in self._cache:
            img = self.ss.octaves[octave][layer]
            gy, gx = np.gradient(img)
            mag = np.hypot(gx, gy)
            ang = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
            self._cache[key] = (mag, ang)
        return self._cache[key]


def _locate_in_pyramid(ss: ScaleSpace, kp: Keypoint) -> tuple[int, int, float, float, float]:
    """Map a detected keypoint back to (octave, layer, x_oct, y_oct, sigma_oct)."""
    p = ss.params
    t = math.log2(kp.scale / p.sigma0)
    octave = min(max(int(math.floor(t)), 0), ss.n_octaves - 1)
    layer = int(round((t - octave) * p.intervals))
    layer = min(max(layer, 0), p.intervals + 2)
    delta = ss.delta(octave)
    return octave, layer, kp.x / delta, kp.y / delta, kp.scale / delta


def _orientation_peaks(ss: ScaleSpace, kp: Keypoint, grads: _GradientCache) -> list[float]:
    p = ss.params
    octave, layer, xc, yc, sig = _locate_in_pyramid(ss, kp)
    mag, ang = grads.get(octave, layer)
    h, w = mag.shape
    sigma_w = p.orientation_sigma_factor * sig
    radius = max(1, int(round(3.0 * sigma_w)))
    r0, r1 = max(0, int(yc) - radius), min(h - 1, int(yc) + radius)
    c0, c1 = max(0, int(xc) - radius), min(w - 1, int(xc) + radius)
    if r1 < r0 or c1 < c0:
        return []
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    dr = rows[:, None] - yc
    dc = cols[None, :] - xc
    weight = np.exp(-(dr * dr + dc * dc) / (2.0 * sigma_w * sigma_w))
    m = mag[r0:r1 + 1, c0:c1 + 1] * weight
    a = ang[r0:r1 + 1, c0:c1 + 1]
    nbins = p.n_orientation_bins
    bins = np.floor(a / (2.0 * np.pi) * nbins).astype(np.int64) % nbins
    hist = np.bincount(bins.ravel(), weights=m.ravel(), minlength=nbins)
    # Two circular box-smoothing passes stabilize peak picking.
    for _ in range(2):
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    peak = hist.max()
    if peak <= 0:
        return []
    out = []
    for i in range(nbins):
        hl, hc, hr = hist[i - 1], hist[i], hist[(i + 1) % nbins]
        if hc >= p.orientation_peak_ratio * peak and hc > hl and hc > hr:
            denom = hl - 2.0 * hc + hr
            shift = 0.0 if denom == 0 else 0.5 * (hl - hr) / denom
            theta = (i + 0.5 + shift) * (2.0 * np.pi / nbins) % (2.0 * np.pi)
            out.append(float(theta))
    return out


def _descriptor_vector(ss: ScaleSpace, kp: Keypoint, theta: float,
                       grads: _GradientCache) -> np.ndarray | None:
    p = ss.params
    octave, layer, xc, yc, sig = _locate_in_pyramid(ss, kp)
    mag, ang = grads.get(octave, layer)
    h, w = mag.shape
    d = _N_SPATIAL_BINS
    nb = _N_ORI_BINS
    hist_width = 3.0 * sig
    radius = int(round(hist_width * math.sqrt(2.0) * (d + 1) * 0.5))
    if (xc - radius < 0 or xc + radius > w - 1
            or yc - radius < 0 or yc + radius > h - 1):
        return None
    r0, r1 = int(yc) - radius, int(yc) + radius
    c0, c1 = int(xc) - radius, int(xc) + radius
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    dr = (rows[:, None] - yc).repeat(len(cols), axis=1)
    dc = (cols[None, :] - xc).repeat(len(rows), axis=0)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    c_rot = (cos_t * dc + sin_t * dr) / hist_width
    r_rot = (-sin_t * dc + cos_t * dr) / hist_width
    rbin = r_rot + 0.5 * d - 0.5
    cbin = c_rot + 0.5 * d - 0.5
    inside = (rbin > -1.0) & (rbin < d) & (cbin > -1.0) & (cbin < d)
    if not inside.any():
        return None
    rbin, cbin = rbin[inside], cbin[inside]
    r_rot, c_rot = r_rot[inside], c_rot[inside]
    weight = np.exp(-(r_rot * r_rot + c_rot * c_rot) / (2.0 * (0.5 * d) ** 2))
    m = (mag[r0:r1 + 1, c0:c1 + 1])[inside] * weight
    obin = np.mod(ang[r0:r1 + 1, c0:c1 + 1][inside] - theta, 2.0 * np.pi) \
        * (nb / (2.0 * np.pi))

    # Trilinear scatter into a (d+2, d+2, nb) accumulator, spill rows trimmed.
    acc = np.zeros((d + 2, d + 2, nb))
    rf = np.floor(rbin).astype(np.int64)
    cf = np.floor(cbin).astype(np.int64)
    of = np.floor(obin).astype(np.int64)
    fr, fc, fo = rbin - rf, cbin - cf, obin - of
    for bit_r in (0, 1):
        wr = m * (fr if bit_r else 1.0 - fr)
        for bit_c in (0, 1):
            wc = wr * (fc if bit_c else 1.0 - fc)
            for bit_o in (0, 1):
                wo = wc * (fo if bit_o else 1.0 - fo)
                np.add.at(acc, (rf + 1 + bit_r, cf + 1 + bit_c,
                                (of + bit_o) % nb), wo)
    vec = acc[1:d + 1, 1:d + 1, :].reshape(-1)
    norm = np.linalg.norm(vec)
    if norm == 0:
        return None
    vec = np.minimum(vec / norm, p.descriptor_clamp)
    norm = np.linalg.norm(vec)
    if norm == 0:
        return None
    return vec / norm


def sift_descriptor(ss: ScaleSpace, kp: Keypoint) -> list[Descriptor]:
    """Descriptors for one keypoint; one per dominant orientation peak.

    Empty when the descriptor window does not fit inside the pyramid layer.
    """
    grads = _GradientCache(ss)
    out = []
    for theta in _orientation_peaks(ss, kp, grads):
        vec = _descriptor_vector(ss, kp, theta, grads)
        if vec is not None:
            out.append(Descriptor(vec))
    return out


def extract_sift(img: Image, p: SiftParams = SiftParams()
                 ) -> list[tuple[Keypoint, Descriptor]]:
    """Detect, orient and describe; keypoints with several orientation peaks
    emit one pair per peak."""
    ss = build_scale_space(img, p)
    grads = _GradientCache(ss)
    out = []
    for kp in detect_keypoints(ss, p):
        for theta in _orientation_peaks(ss, kp, grads):
            vec = _descriptor_vector(ss, kp, theta, grads)
            if vec is not None:
                oriented = Keypoint(x=kp.x, y=kp.y, scale=kp.scale,
                                    orientation=theta, response=kp.response)
                out.append((oriented, Descriptor(vec)))
    return out
