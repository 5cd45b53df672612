"""Binary and text file formats: ``ENVD`` descriptors, ``LOCD`` distributions,
episode streams and PGM heatmap renders."""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable, List, Optional

import numpy as np

from .location_prior import CameraTrack, LocationDistribution, make_prior
from .mesh_env import DescriptorKind, EnvDescriptor, GridSpec
from .model import EpisodeClip

ENVD_MAGIC = b"ENVD"
LOCD_MAGIC = b"LOCD"
OBS_KIND = 255


def _read(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise ValueError("unexpected end of file")
    return b


def write_array_block(fh: BinaryIO, kind: int, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype="<f8")
    fh.write(ENVD_MAGIC)
    fh.write(struct.pack("<BI", kind, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_array_block(fh: BinaryIO):
    if _read(fh, 4) != ENVD_MAGIC:
        raise ValueError("missing ENVD magic")
    kind, rank = struct.unpack("<BI", _read(fh, 5))
    dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
    n = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read(fh, 8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    return kind, data


def save_descriptor(env: EnvDescriptor, path) -> None:
    with open(path, "wb") as fh:
        write_array_block(fh, int(env.kind), env.data)


def load_descriptor(path, grid: GridSpec, num_classes: Optional[int] = None) -> EnvDescriptor:
    """Read an ``ENVD`` file; geometry and class count are not stored in it."""
    with open(path, "rb") as fh:
        kind, data = read_array_block(fh)
    kind = DescriptorKind(kind)
    if kind == DescriptorKind.HVR:
        data = np.rint(data).astype(np.int64)
    return EnvDescriptor(grid, kind, data, num_classes)


def save_location(d: LocationDistribution, path) -> None:
    arr = np.asarray(d.probs, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(LOCD_MAGIC)
        fh.write(struct.pack("<3I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_location(path) -> LocationDistribution:
    with open(path, "rb") as fh:
        if _read(fh, 4) != LOCD_MAGIC:
            raise ValueError(f"{path}: not a LOCD file")
        dims = struct.unpack("<3I", _read(fh, 12))
        data = np.frombuffer(_read(fh, 8 * int(np.prod(dims))), dtype="<f8").reshape(dims)
    return LocationDistribution(data.astype(np.float64))


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def write_episodes(episodes: Iterable[EpisodeClip], num_actions: int, fh: BinaryIO) -> None:
    """Concatenated records: text header, label, track, then an obs block."""
    for ep in episodes:
        lines = [f"episode N={num_actions}", f"label {int(ep.label)}"]
        if ep.true_position is not None:
            x, y, z = ep.true_position
            lines.append(f"position {float(x)!r} {float(y)!r} {float(z)!r}")
        lines.append("track")
        track = ep.track if ep.track is not None else CameraTrack([])
        for t, (x, y, z) in track.key_frames:
            lines.append(f"k {int(t)} {float(x)!r} {float(y)!r} {float(z)!r}")
        lines.append("obs")
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        write_array_block(fh, OBS_KIND, ep.obs)


def _readline(fh: BinaryIO) -> Optional[str]:
    line = fh.readline()
    if not line:
        return None
    return line.decode("ascii").rstrip("\n")


def read_episodes(fh: BinaryIO, grid: GridSpec, sigma: float = 1.0) -> List[EpisodeClip]:
    """Parse an episode stream; priors are rebuilt from the tracks on ``grid``."""
    out = []
    while True:
        header = _readline(fh)
        if header is None or header == "":
            break
        if not header.startswith("episode N="):
            raise ValueError(f"bad episode header {header!r}")
        label, position, frames = None, None, []
        while True:
            line = _readline(fh)
            if line is None:
                raise ValueError("truncated episode record")
            tok = line.split()
            if tok[0] == "label":
                label = int(tok[1])
            elif tok[0] == "position":
                position = tuple(float(v) for v in tok[1:4])
            elif tok[0] == "track":
                pass
            elif tok[0] == "k":
                frames.append((int(tok[1]), tuple(float(v) for v in tok[2:5])))
            elif tok[0] == "obs":
                break
            else:
                raise ValueError(f"unexpected episode line {line!r}")
        _, obs = read_array_block(fh)
        track = CameraTrack(frames)
        out.append(EpisodeClip(obs, label, make_prior(track, grid, sigma), position, track))
    return out


def save_episodes(episodes, num_actions: int, path) -> None:
    with open(path, "wb") as fh:
        write_episodes(episodes, num_actions, fh)


def load_episodes(path, grid: GridSpec, sigma: float = 1.0) -> List[EpisodeClip]:
    with open(path, "rb") as fh:
        return read_episodes(fh, grid, sigma)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def top_down_pgm(d: LocationDistribution) -> str:
    """Plain PGM (P2) of the max over height; rows are y, columns are x.

    A constant map renders as uniform mid-gray.
    """
    proj = d.probs.max(axis=2).T
    lo, hi = proj.min(), proj.max()
    if hi - lo <= 1e-15 * max(abs(hi), 1.0):
        img = np.full(proj.shape, 128, dtype=np.int64)
    else:
        img = np.rint(255 * (proj - lo) / (hi - lo)).astype(np.int64)
    h, w = img.shape
    rows = [" ".join(str(v) for v in row) for row in img]
    return f"P2\n{w} {h}\n255\n" + "\n".join(rows) + "\n"
