"""Keypoint/descriptor records and the binary descriptor file format.

Descriptor files are little-endian: magic ``OVCD``, format version (u32),
descriptor dimension (u32), record count (u64), then per record x, y, scale,
orientation as f32 followed by ``dim`` f32 descriptor values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"OVCD"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIQ")

DURF_DIM = 64
SIFT_DIM = 128


class DescriptorFileError(Exception):
    """Raised for bad magic, version, or truncated descriptor files."""


@dataclass(frozen=True)
class Keypoint:
    """Sampled or detected location; orientation is 0 for dense samples."""

    x: float
    y: float
    scale: float
    orientation: float = 0.0
    response: float = 0.0


@dataclass(frozen=True)
class Descriptor:
    """Fixed-length feature vector (64 for dense patches, 128 for SIFT)."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("descriptor values must be 1-D")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def descriptor_matrix(features) -> np.ndarray:
    """Stack descriptors from (Keypoint, Descriptor) pairs into an (n, dim) array."""
    if not features:
        return np.zeros((0, 0))
    return np.stack([np.asarray(d.values) for _, d in features])


def save_descriptors(path, features, dim: int | None = None) -> None:
    """Write (Keypoint, Descriptor) pairs; ``dim`` must be given when empty."""
    if dim is None:
        if not features:
            raise ValueError("dim is required for an empty feature list")
        dim = features[0][1].dim
    records = np.zeros((len(features), 4 + dim), dtype="<f4")
    for i, (kp, desc) in enumerate(features):
        if desc.dim != dim:
            raise ValueError(f"descriptor {i} has dim {desc.dim}, expected {dim}")
        records[i, :4] = (kp.x, kp.y, kp.scale, kp.orientation)
        records[i, 4:] = desc.values
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, dim, len(features)))
        fh.write(records.tobytes())


def load_descriptors(path) -> list[tuple[Keypoint, Descriptor]]:
    buf = Path(path).read_bytes()
    dim, count, payload = _parse_header(path, buf)
    expected = count * (4 + dim) * 4
    if len(payload) < expected:
        raise DescriptorFileError(f"{path}: truncated (need {expected} payload bytes)")
    records = np.frombuffer(payload[:expected], dtype="<f4").reshape(count, 4 + dim)
    out = []
    for row in records:
        kp = Keypoint(x=float(row[0]), y=float(row[1]), scale=float(row[2]),
                      orientation=float(row[3]))
        out.append((kp, Descriptor(row[4:].astype(np.float64))))
    return out


def save_vectors(path, vectors: np.ndarray) -> None:
    """Write bare f32 vectors (e.g. histograms) under the same header scheme."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError("expected an (n, dim) array")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, vectors.shape[1], vectors.shape[0]))
        fh.write(vectors.astype("<f4").tobytes())


def load_vectors(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    dim, count, payload = _parse_header(path, buf)
    expected = count * dim * 4
    if len(payload) < expected:
        raise DescriptorFileError(f"{path}: truncated (need {expected} payload bytes)")
    data = np.frombuffer(payload[:expected], dtype="<f4").reshape(count, dim)
    return data.astype(np.float64)


def _parse_header(path, buf: bytes) -> tuple[int, int, bytes]:
    if len(buf) < _HEADER.size:
        raise DescriptorFileError(f"{path}: too short for a header")
    magic, version, dim, count = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DescriptorFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DescriptorFileError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise DescriptorFileError(f"{path}: zero descriptor dimension")
    return dim, count, buf[_HEADER.size:]
