"""Slow, loop-based reference implementations used only by the tests.

They deliberately avoid the vectorized index arithmetic of the package: every
child voxel is checked against every vertex with explicit interval tests.
"""
import itertools

import numpy as np


def _cell_bounds(origin, extents, n, i, axis):
    size = extents[axis] / n
    return origin[axis] + i * size, origin[axis] + (i + 1) * size


def _in_cell(p, origin, extents, ncells, idx):
    """Membership mask of points ``p`` (n, 3) in cell ``idx`` of an ``ncells`` grid."""
    p = np.atleast_2d(p)
    ok = np.ones(len(p), dtype=bool)
    for a in range(3):
        ok &= (p[:, a] >= origin[a]) & (p[:, a] <= origin[a] + extents[a])
        lo, hi = _cell_bounds(origin, extents, ncells[a], idx[a], a)
        if idx[a] > 0:
            ok &= p[:, a] >= lo
        if idx[a] < ncells[a] - 1:
            ok &= p[:, a] < hi
    return ok


def hvr(vertices, labels, C, origin, extents, dims, M):
    X, Y, Z = dims
    out = np.zeros((X, Y, Z, M ** 3), dtype=np.int64)
    ncells = (X * M, Y * M, Z * M)
    for px, py, pz in itertools.product(range(X), range(Y), range(Z)):
        for cz, cy, cx in itertools.product(range(M), range(M), range(M)):
            idx = (px * M + cx, py * M + cy, pz * M + cz)
            mask = _in_cell(vertices, origin, extents, ncells, idx)
            votes = [int(np.sum(labels[mask] == c)) for c in range(C)]
            best = 0
            for c in range(C):
                if votes[c] > votes[best]:
                    best = c
            out[px, py, pz, cz * M * M + cy * M + cx] = best
    return out


def semvoxel(vertices, labels, C, origin, extents, dims):
    out = np.zeros(tuple(dims) + (C,))
    for idx in itertools.product(*(range(d) for d in dims)):
        inside = labels[_in_cell(vertices, origin, extents, dims, idx)]
        if not len(inside):
            out[idx][0] = 1.0
        else:
            for c in range(C):
                out[idx][c] = float(np.sum(inside == c)) / len(inside)
    return out


def ground_plane(sem):
    X, Y, Z, C = sem.shape
    out = np.zeros((X, Y, C))
    for x in range(X):
        for y in range(Y):
            cells = [sem[x, y, z] for z in range(Z) if sem[x, y, z, 0] != 1.0]
            if not cells:
                out[x, y, 0] = 1.0
            else:
                s = sum(cells)
                out[x, y] = s / s.sum()
    return out


def affordance(positions, actions, N, origin, extents, dims):
    positions = np.asarray(positions, dtype=np.float64)
    actions = np.asarray(actions)
    out = np.full(tuple(dims) + (N,), 1.0 / N)
    for idx in itertools.product(*(range(d) for d in dims)):
        acts = actions[_in_cell(positions, origin, extents, dims, idx)]
        if len(acts):
            out[idx] = [float(np.sum(acts == a)) / len(acts) for a in range(N)]
    return out


def random_mesh_case(rng, max_vertices=500, max_dim=4, max_M=3):
    dims = tuple(int(v) for v in rng.integers(1, max_dim + 1, size=3))
    M = int(rng.integers(1, max_M + 1))
    C = int(rng.integers(2, 6))
    origin = rng.uniform(-2, 2, size=3)
    extents = rng.uniform(0.5, 3.0, size=3)
    n = int(rng.integers(1, max_vertices + 1))
    # a margin outside the box exercises the ignored-vertex path
    verts = origin + rng.uniform(-0.1, 1.1, size=(n, 3)) * extents
    # snap some vertices onto cell faces, including the global upper boundary
    k = n // 5
    if k:
        ncell = np.asarray(dims) * M
        cells = rng.integers(0, ncell + 1, size=(k, 3))
        verts[:k] = origin + cells * (extents / ncell)
        verts[:k, 0] = np.where(cells[:, 0] == ncell[0], origin[0] + extents[0], verts[:k, 0])
    labels = rng.integers(1, C, size=n)
    return verts, labels, C, tuple(origin), tuple(extents), dims, M
