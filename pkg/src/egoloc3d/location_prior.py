"""Key-frame camera positions -> prior distribution over action locations."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, TextIO, Tuple

import numpy as np
from scipy.ndimage import correlate1d

from .mesh_env import GridSpec

DEFAULT_SIGMA = 1.0


@dataclass
class LocationDistribution:
    probs: np.ndarray
    uniform_fallback: bool = False

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValueError(f"location distribution must be 3-D, got shape {self.probs.shape}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.probs.shape

    def is_valid(self, tol: float = 1e-9) -> bool:
        return bool(np.all(self.probs >= 0) and abs(self.probs.sum() - 1.0) <= tol)

    def argmax(self) -> Tuple[int, int, int]:
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.probs), self.dims))

    @classmethod
    def uniform(cls, dims, fallback: bool = False) -> "LocationDistribution":
        n = int(np.prod(dims))
        return cls(np.full(tuple(dims), 1.0 / n), fallback)


@dataclass
class CameraTrack:
    key_frames: List[Tuple[int, Tuple[float, float, float]]] = field(default_factory=list)

    def __post_init__(self):
        frames = [int(t) for t, _ in self.key_frames]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("key-frame indices must be strictly increasing")
        for _, p in self.key_frames:
            if len(p) != 3 or not np.all(np.isfinite(p)):
                raise ValueError("key-frame positions must be finite 3-vectors")

    def __len__(self):
        return len(self.key_frames)

    @property
    def positions(self) -> np.ndarray:
        if not self.key_frames:
            return np.zeros((0, 3))
        return np.array([p for _, p in self.key_frames], dtype=np.float64)


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-offsets ** 2 / (2 * sigma ** 2))


def make_prior(track: CameraTrack, grid: GridSpec, sigma: float = DEFAULT_SIGMA) -> LocationDistribution:
    """Gaussian-smoothed key-frame occupancy, uniform when nothing registers.

    Key frames outside the grid are dropped. The remaining one-hot maps are
    averaged, convolved with a separable Gaussian (std ``sigma`` voxels,
    truncated at ``ceil(3 sigma)``, zero padding) and renormalized once.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    dims = grid.dims
    pos = track.positions
    if len(pos) == 0:
        return LocationDistribution.uniform(dims)
    idx, inside = grid.voxel_index(pos)
    idx = idx[inside]
    if len(idx) == 0:
        return LocationDistribution.uniform(dims, fallback=True)
    occ = np.zeros(dims)
    np.add.at(occ, tuple(idx.T), 1.0 / len(idx))
    kernel = gaussian_kernel_1d(sigma)
    for axis in range(3):
        occ = correlate1d(occ, kernel, axis=axis, mode="constant", cval=0.0)
    return LocationDistribution(occ / occ.sum())


def downsample_distribution(d: LocationDistribution, fx: int, fy: int, fz: int) -> LocationDistribution:
    """Sum-pool over ``fx x fy x fz`` blocks; mass is conserved."""
    W, D, H = d.dims
    if W % fx or D % fy or H % fz:
        raise ValueError(f"factors ({fx}, {fy}, {fz}) do not divide dims {d.dims}")
    p = d.probs.reshape(W // fx, fx, D // fy, fy, H // fz, fz).sum(axis=(1, 3, 5))
    return LocationDistribution(p, d.uniform_fallback)


# ---------------------------------------------------------------------------
# track text format
# ---------------------------------------------------------------------------

def parse_track(stream: TextIO | str) -> CameraTrack:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    frames = []
    seen_header = False
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] == "track" and len(tok) == 1:
            seen_header = True
        elif tok[0] == "k" and len(tok) == 5:
            try:
                frames.append((int(tok[1]), tuple(float(t) for t in tok[2:5])))
            except ValueError:
                raise ValueError(f"line {lineno}: malformed key frame") from None
        else:
            raise ValueError(f"line {lineno}: unexpected record {line!r}")
    if not seen_header:
        raise ValueError("missing 'track' header")
    return CameraTrack(frames)


def write_track(track: CameraTrack, stream: TextIO) -> None:
    stream.write("track\n")
    for t, (x, y, z) in track.key_frames:
        stream.write(f"k {int(t)} {float(x)!r} {float(y)!r} {float(z)!r}\n")


def as_location(d, dims: Optional[tuple] = None) -> LocationDistribution:
    """Coerce an array or ``LocationDistribution`` into a distribution."""
    if isinstance(d, LocationDistribution):
        return d
    arr = np.asarray(d, dtype=np.float64)
    if dims is not None:
        arr = arr.reshape(dims)
    return LocationDistribution(arr)
