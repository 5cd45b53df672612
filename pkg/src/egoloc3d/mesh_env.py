"""Semantic mesh parsing and rasterization into volumetric environment descriptors.

Four descriptor kinds are produced over a parent voxel grid:

* ``HVR`` -- per parent voxel, the flattened ``M x M x M`` child-voxel semantic
  occupancy map (class ids, 0 = empty space).
* ``SemVoxel`` -- per parent voxel, the class frequency of contained vertices.
* ``GroundPlane2D`` -- SemVoxel averaged over the non-empty cells of each column.
* ``Affordance`` -- per parent voxel, the distribution of training actions
  registered there.
"""
from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO

import numpy as np


class MeshFormatError(ValueError):
    """Raised when a mesh text stream cannot be parsed."""


class DescriptorKind(enum.IntEnum):
    HVR = 0
    SEMVOXEL = 1
    GROUND_PLANE_2D = 2
    AFFORDANCE = 3


@dataclass
class SemanticMesh:
    vertices: np.ndarray  # (n, 3) float64, meters
    labels: np.ndarray  # (n,) int64 object-class ids, never 0
    num_classes: int
    faces: Optional[np.ndarray] = None  # (m, 3) int64; parsed, unused by rasterization

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.faces is not None:
            self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.validate()

    def validate(self):
        n = len(self.vertices)
        if n == 0:
            raise MeshFormatError("mesh has zero vertices")
        if len(self.labels) != n:
            raise MeshFormatError("labels and vertices differ in length")
        if self.num_classes < 2:
            raise MeshFormatError("num_classes must be >= 2 (class 0 is reserved)")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshFormatError("non-finite vertex coordinate")
        if np.any(self.labels == 0):
            raise MeshFormatError("label 0 is reserved for empty space")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise MeshFormatError(f"label out of range [1, {self.num_classes})")
        if self.faces is not None and len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise MeshFormatError("face references a missing vertex")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class GridSpec:
    origin: tuple
    extents: tuple
    dims: tuple
    M: int = 1

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "extents", tuple(float(v) for v in self.extents))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "M", int(self.M))
        if len(self.origin) != 3 or len(self.extents) != 3 or len(self.dims) != 3:
            raise ValueError("origin, extents and dims must have 3 components")
        if min(self.dims) < 1 or self.M < 1:
            raise ValueError("grid dims and M must be >= 1")
        if not all(np.isfinite(self.origin)) or min(self.extents) <= 0:
            raise ValueError("extents must be strictly positive")

    @property
    def parent_size(self) -> np.ndarray:
        return np.asarray(self.extents) / np.asarray(self.dims)

    @property
    def child_size(self) -> np.ndarray:
        return self.parent_size / self.M

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    def pooled(self, factors) -> "GridSpec":
        """Same extents, parent dims divided by ``factors``."""
        factors = tuple(int(f) for f in factors)
        if any(d % f for d, f in zip(self.dims, factors)):
            raise ValueError(f"factors {factors} do not divide dims {self.dims}")
        return GridSpec(self.origin, self.extents,
                        tuple(d // f for d, f in zip(self.dims, factors)), self.M)

    def voxel_index(self, points, resolution: int = 1):
        """Integer cell indices of ``points`` at ``dims * resolution`` cells per axis.

        Cells are half-open ``[lo, hi)``; points exactly on the upper boundary are
        clamped into the last cell. Returns ``(idx, inside)`` where ``idx`` rows of
        outside points are meaningless.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n_cells = np.asarray(self.dims) * resolution
        size = np.asarray(self.extents) / n_cells
        origin = np.asarray(self.origin)
        rel = pts - origin
        top = origin + np.asarray(self.extents)
        inside = np.all((pts >= origin) & (pts <= top), axis=1)
        idx = np.clip(np.floor(rel / size), 0, n_cells - 1).astype(np.int64)
        # boundaries are origin + i * size; repair floor() rounding on exact faces
        lo = origin + idx * size
        idx -= (pts < lo) & (idx > 0)
        hi = origin + (idx + 1) * size
        idx += (pts >= hi) & (idx < n_cells - 1)
        return idx, inside


@dataclass
class EnvDescriptor:
    grid: GridSpec
    kind: DescriptorKind
    data: np.ndarray
    num_classes: Optional[int] = None
    info: dict = field(default_factory=dict)

    @property
    def n_channels(self) -> int:
        return self.data.shape[-1]


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def parse_mesh(stream: TextIO | str, num_classes: Optional[int] = None) -> SemanticMesh:
    """Parse the line-oriented mesh format.

    ``mesh C=<int>`` header, ``v x y z label`` vertices, ``f i j k`` faces
    (0-based) and ``#`` comments. ``num_classes`` is used when the stream has no
    header; a header overrides it.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    verts, labels, faces = [], [], []
    C = num_classes
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if tok[0] == "mesh":
                if len(tok) != 2 or not tok[1].startswith("C="):
                    raise ValueError("expected 'mesh C=<int>'")
                C = int(tok[1][2:])
            elif tok[0] == "v":
                if len(tok) != 5:
                    raise ValueError("expected 'v x y z label'")
                verts.append([float(t) for t in tok[1:4]])
                labels.append(int(tok[4]))
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise ValueError("expected 'f i j k'")
                faces.append([int(t) for t in tok[1:4]])
            else:
                raise ValueError(f"unknown record type {tok[0]!r}")
        except ValueError as exc:
            raise MeshFormatError(f"line {lineno}: {exc}") from None
        if tok[0] == "v":
            lab = labels[-1]
            if lab == 0:
                raise MeshFormatError(f"line {lineno}: label 0 is reserved for empty space")
            if lab < 0 or (C is not None and lab >= C):
                raise MeshFormatError(f"line {lineno}: label {lab} out of range")
            if not np.all(np.isfinite(verts[-1])):
                raise MeshFormatError(f"line {lineno}: non-finite coordinate")
    if C is None:
        raise MeshFormatError("class count unknown: no 'mesh C=' header and no num_classes")
    if not verts:
        raise MeshFormatError("mesh has zero vertices")
    return SemanticMesh(np.array(verts), np.array(labels), C,
                        np.array(faces, dtype=np.int64) if faces else None)


def write_mesh(mesh: SemanticMesh, stream: TextIO) -> None:
    stream.write(f"mesh C={mesh.num_classes}\n")
    for (x, y, z), lab in zip(mesh.vertices, mesh.labels):
        stream.write(f"v {float(x)!r} {float(y)!r} {float(z)!r} {int(lab)}\n")
    if mesh.faces is not None:
        for i, j, k in mesh.faces:
            stream.write(f"f {int(i)} {int(j)} {int(k)}\n")


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _vertices_in_grid(mesh: SemanticMesh, grid: GridSpec, resolution: int):
    idx, inside = grid.voxel_index(mesh.vertices, resolution)
    return idx[inside], mesh.labels[inside], int((~inside).sum())


def build_hvr(mesh: SemanticMesh, grid: GridSpec) -> EnvDescriptor:
    """Hierarchical volumetric representation, shape ``(X, Y, Z, M**3)``.

    Each child voxel takes the majority label of its vertices (lowest class id
    on ties, 0 when empty). Child cells inside a parent are flattened with x
    varying fastest, then y, then z.
    """
    X, Y, Z = grid.dims
    M = grid.M
    C = mesh.num_classes
    idx, labels, n_out = _vertices_in_grid(mesh, grid, M)
    shape = (X * M, Y * M, Z * M)
    flat = np.ravel_multi_index(idx.T, shape) if len(idx) else np.zeros(0, np.int64)
    counts = np.bincount(flat * C + labels, minlength=int(np.prod(shape)) * C)
    counts = counts.reshape(-1, C)
    # argmax returns the first maximum, i.e. the lowest class id; all-zero rows give 0
    child = counts.argmax(axis=1).reshape(shape)
    data = (child.reshape(X, M, Y, M, Z, M)
                 .transpose(0, 2, 4, 5, 3, 1)
                 .reshape(X, Y, Z, M ** 3))
    return EnvDescriptor(grid, DescriptorKind.HVR, data.astype(np.int64), C,
                         {"n_outside": n_out})


def build_semvoxel(mesh: SemanticMesh, grid: GridSpec) -> EnvDescriptor:
    C = mesh.num_classes
    idx, labels, n_out = _vertices_in_grid(mesh, grid, 1)
    n = grid.n_cells
    flat = np.ravel_multi_index(idx.T, grid.dims) if len(idx) else np.zeros(0, np.int64)
    counts = np.bincount(flat * C + labels, minlength=n * C).reshape(n, C).astype(np.float64)
    totals = counts.sum(axis=1)
    empty = totals == 0
    counts[empty, 0] = 1.0
    totals[empty] = 1.0
    data = (counts / totals[:, None]).reshape(*grid.dims, C)
    return EnvDescriptor(grid, DescriptorKind.SEMVOXEL, data, C, {"n_outside": n_out})


def build_ground_plane(semvoxel: EnvDescriptor) -> EnvDescriptor:
    if semvoxel.kind != DescriptorKind.SEMVOXEL:
        raise ValueError(f"expected a SemVoxel descriptor, got {semvoxel.kind.name}")
    d = semvoxel.data
    C = d.shape[-1]
    nonempty = d[..., 0] != 1.0
    summed = (d * nonempty[..., None]).sum(axis=2)
    totals = summed.sum(axis=-1)
    out = np.zeros(d.shape[:2] + (C,))
    has = totals > 0
    out[has] = summed[has] / totals[has][:, None]
    out[~has, 0] = 1.0
    return EnvDescriptor(semvoxel.grid, DescriptorKind.GROUND_PLANE_2D, out,
                         semvoxel.num_classes, dict(semvoxel.info))


def build_affordance(episodes: Iterable, grid: GridSpec, num_actions: int) -> EnvDescriptor:
    """Per-voxel empirical distribution of training actions.

    Each episode needs ``label`` and ``true_position`` attributes; episodes with
    no position or a position outside the grid are skipped and counted.
    """
    if num_actions <= 0:
        raise ValueError("num_actions must be positive")
    counts = np.zeros(grid.dims + (num_actions,))
    skipped = 0
    for ep in episodes:
        pos = getattr(ep, "true_position", None)
        if pos is None:
            skipped += 1
            continue
        idx, inside = grid.voxel_index(pos)
        if not inside[0]:
            skipped += 1
            continue
        counts[tuple(idx[0])][int(ep.label)] += 1
    totals = counts.sum(axis=-1, keepdims=True)
    data = np.where(totals > 0, counts / np.maximum(totals, 1), 1.0 / num_actions)
    return EnvDescriptor(grid, DescriptorKind.AFFORDANCE, data, None, {"n_skipped": skipped})


def descriptor_features(env: EnvDescriptor) -> np.ndarray:
    """Float feature volume ``(X, Y, Z, channels)`` fed to the environment branch.

    HVR class ids are one-hot expanded into ``M**3 * C`` binary channels (child
    cell major, class minor). Ground-plane columns are broadcast over z.
    """
    if env.kind == DescriptorKind.HVR:
        C = env.num_classes
        if C is None:
            raise ValueError("HVR descriptor needs num_classes for one-hot expansion")
        onehot = np.eye(C)[env.data]
        return onehot.reshape(env.data.shape[:3] + (-1,))
    if env.kind == DescriptorKind.GROUND_PLANE_2D:
        Z = env.grid.dims[2]
        return np.repeat(env.data[:, :, None, :], Z, axis=2).astype(np.float64)
    return np.asarray(env.data, dtype=np.float64)
