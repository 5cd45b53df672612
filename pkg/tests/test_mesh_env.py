import io

import numpy as np
import pytest

from egoloc3d.mesh_env import (DescriptorKind, EnvDescriptor, GridSpec, MeshFormatError,
                               SemanticMesh, build_affordance, build_ground_plane, build_hvr,
                               build_semvoxel, descriptor_features, parse_mesh, write_mesh)

import oracles


class _Ep:
    def __init__(self, label, pos):
        self.label = label
        self.true_position = pos


def _unit_grid(dims=(2, 2, 2), M=1):
    return GridSpec((0, 0, 0), tuple(float(d) for d in dims), dims, M)


# -- parsing ---------------------------------------------------------------

def test_parse_single_vertex():
    m = parse_mesh("v 0 0 0 3\n", num_classes=4)
    assert m.n_vertices == 1 and m.labels.tolist() == [3]


def test_parse_rejects_empty_label():
    with pytest.raises(MeshFormatError, match="reserved"):
        parse_mesh("mesh C=4\nv 0 0 0 0\n")


@pytest.mark.parametrize("text, where", [
    ("mesh C=4\nv 0 0 0 1\nq 1 2 3\n", "line 3"),
    ("mesh C=4\nv 0 0 1\n", "line 2"),
    ("mesh C=4\nv 0 0 0 9\n", "line 2"),
    ("mesh C=4\nv 0 nan 0 1\n", "line 2"),
    ("mesh C=4\n# nothing\n", "zero vertices"),
    ("v 0 0 0 1\n", "class count"),
])
def test_parse_errors(text, where):
    with pytest.raises(MeshFormatError, match=where):
        parse_mesh(text)


def test_faces_must_reference_vertices():
    with pytest.raises(MeshFormatError):
        parse_mesh("mesh C=3\nv 0 0 0 1\nf 0 0 4\n")


def test_write_parse_round_trip():
    rng = np.random.default_rng(3)
    mesh = SemanticMesh(rng.normal(size=(100, 3)), rng.integers(1, 5, 100), 5,
                        rng.integers(0, 100, size=(30, 3)))
    buf = io.StringIO()
    write_mesh(mesh, buf)
    back = parse_mesh(buf.getvalue())
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.labels, mesh.labels)
    assert np.array_equal(back.faces, mesh.faces)
    assert back.num_classes == 5


# -- grid ------------------------------------------------------------------

def test_grid_invariants():
    g = GridSpec((0, 0, 0), (2.8, 2.8, 0.8), (28, 28, 8), 4)
    assert np.allclose(g.parent_size, 0.1)
    assert np.allclose(g.child_size, 0.025)
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), (1, 0, 1), (2, 2, 2))
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), (1, 1, 1), (0, 2, 2))


def test_upper_boundary_clamped_and_half_open():
    g = _unit_grid((2, 2, 2))
    idx, inside = g.voxel_index([[2, 2, 2], [1, 1, 1], [0, 0, 0], [2.0001, 0, 0]])
    assert idx[:3].tolist() == [[1, 1, 1], [1, 1, 1], [0, 0, 0]]
    assert inside.tolist() == [True, True, True, False]


# -- descriptors -----------------------------------------------------------

def test_hvr_default_resolution_shape():
    g = GridSpec((0, 0, 0), (2.8, 2.8, 0.8), (28, 28, 8), 4)
    mesh = SemanticMesh([[0.05, 0.05, 0.05]], [1], 3)
    assert build_hvr(mesh, g).data.shape == (28, 28, 8, 64)


def test_hvr_nothing_inside_is_empty():
    mesh = SemanticMesh([[5, 5, 5], [-1, 0, 0]], [1, 2], 3)
    d = build_hvr(mesh, _unit_grid(M=2))
    assert not d.data.any()
    assert d.info["n_outside"] == 2


def test_hvr_tie_goes_to_lowest_class():
    mesh = SemanticMesh([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.3, 0.1, 0.1], [0.2, 0.3, 0.1]],
                        [3, 2, 3, 2], 4)
    d = build_hvr(mesh, _unit_grid((1, 1, 1), M=1))
    assert d.data[0, 0, 0, 0] == 2


def test_hvr_child_order_is_x_fastest():
    g = _unit_grid((1, 1, 1), M=2)
    # child (cx, cy, cz) = (1, 0, 0) -> flat 1; (0, 1, 0) -> 2; (0, 0, 1) -> 4
    mesh = SemanticMesh([[0.75, 0.25, 0.25], [0.25, 0.75, 0.25], [0.25, 0.25, 0.75]], [1, 2, 3], 4)
    assert build_hvr(mesh, g).data[0, 0, 0].tolist() == [0, 1, 2, 0, 3, 0, 0, 0]


def test_semvoxel_hand_count():
    mesh = SemanticMesh([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.3, 0.3, 0.3]], [2, 2, 3], 4)
    d = build_semvoxel(mesh, _unit_grid((2, 1, 1)))
    assert np.allclose(d.data[0, 0, 0], [0, 0, 2 / 3, 1 / 3], atol=1e-9)
    assert np.array_equal(d.data[1, 0, 0], [1, 0, 0, 0])


def test_ground_plane_cases():
    sem = np.zeros((1, 2, 3, 4))
    sem[..., 0] = 1.0
    sem[0, 0, 1] = [0, 0.5, 0.5, 0]
    sem[0, 1, 0] = [0, 1, 0, 0]
    sem[0, 1, 2] = [0, 0, 0, 1]
    d = build_ground_plane(EnvDescriptor(_unit_grid((1, 2, 3)), DescriptorKind.SEMVOXEL, sem, 4))
    assert np.allclose(d.data[0, 0], [0, 0.5, 0.5, 0])
    assert np.allclose(d.data[0, 1], [0, 0.5, 0, 0.5])
    with pytest.raises(ValueError):
        build_ground_plane(d)


def test_affordance_examples():
    g = _unit_grid((2, 2, 1))
    d = build_affordance([_Ep(2, (1.5, 1.5, 0.5))], g, 3)
    assert np.allclose(d.data[1, 1, 0], [0, 0, 1])
    assert np.allclose(d.data[0, 0, 0], 1 / 3)
    d = build_affordance([_Ep(0, (0.5, 0.5, 0.5)), _Ep(1, (0.2, 0.2, 0.2)), _Ep(1, None),
                          _Ep(0, (9, 9, 9))], g, 3)
    assert np.allclose(d.data[0, 0, 0], [0.5, 0.5, 0])
    assert d.info["n_skipped"] == 2
    assert np.allclose(build_affordance([], g, 3).data, 1 / 3)
    with pytest.raises(ValueError):
        build_affordance([], g, 0)


def test_brute_force_oracles_on_random_meshes():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        verts, labels, C, origin, extents, dims, M = oracles.random_mesh_case(rng)
        grid = GridSpec(origin, extents, dims, M)
        mesh = SemanticMesh(verts, labels, C)
        assert np.array_equal(build_hvr(mesh, grid).data,
                              oracles.hvr(verts, labels, C, origin, extents, dims, M))
        sem = build_semvoxel(mesh, grid)
        ref = oracles.semvoxel(verts, labels, C, origin, extents, dims)
        assert np.array_equal(sem.data, ref)
        assert np.array_equal(build_ground_plane(sem).data, oracles.ground_plane(ref))
        acts = rng.integers(0, 3, size=len(verts))
        eps = [_Ep(int(a), tuple(v)) for a, v in zip(acts[:40], verts[:40])]
        aff = build_affordance(eps, grid, 3)
        assert np.allclose(aff.data, oracles.affordance(verts[:40], acts[:40], 3, origin, extents, dims),
                           atol=1e-12, rtol=0)


def test_shuffle_and_translation_invariance():
    rng = np.random.default_rng(5)
    verts, labels, C, origin, extents, dims, M = oracles.random_mesh_case(rng, 300)
    grid = GridSpec(origin, extents, dims, M)
    base = build_hvr(SemanticMesh(verts, labels, C), grid).data
    perm = rng.permutation(len(verts))
    assert np.array_equal(build_hvr(SemanticMesh(verts[perm], labels[perm], C), grid).data, base)
    # vertices near child-cell centres, so no rounding sits on a face
    grid = GridSpec((0.5, -1.25, 0.25), (2.0, 3.0, 1.0), (2, 3, 2), 2)
    cells = rng.integers(0, [4, 6, 4], size=(200, 3))
    pts = np.asarray(grid.origin) + (cells + 0.5 + rng.uniform(-0.3, 0.3, (200, 3))) * grid.child_size
    lab = rng.integers(1, 4, 200)
    shift = np.array([4.0, -8.0, 2.0])
    moved = GridSpec(tuple(np.asarray(grid.origin) + shift), grid.extents, grid.dims, grid.M)
    m0, m1 = SemanticMesh(pts, lab, 4), SemanticMesh(pts + shift, lab, 4)
    assert np.array_equal(build_hvr(m0, grid).data, build_hvr(m1, moved).data)
    assert np.allclose(build_semvoxel(m0, grid).data, build_semvoxel(m1, moved).data)


def test_probability_descriptors_normalized():
    rng = np.random.default_rng(9)
    verts, labels, C, origin, extents, dims, M = oracles.random_mesh_case(rng)
    sem = build_semvoxel(SemanticMesh(verts, labels, C), GridSpec(origin, extents, dims, M))
    assert np.allclose(sem.data.sum(-1), 1, atol=1e-9)
    assert np.allclose(build_ground_plane(sem).data.sum(-1), 1, atol=1e-9)


def test_descriptor_features_shapes():
    g = _unit_grid((2, 2, 2), M=2)
    mesh = SemanticMesh([[0.1, 0.1, 0.1]], [2], 3)
    f = descriptor_features(build_hvr(mesh, g))
    assert f.shape == (2, 2, 2, 8 * 3)
    assert f[0, 0, 0, 2] == 1 and f.sum() == 2 * 2 * 2 * 8
    gp = build_ground_plane(build_semvoxel(mesh, g))
    assert descriptor_features(gp).shape == (2, 2, 2, 3)
