"""Tests for marching cubes and OBJ export"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sirlab.errors import ParameterError, SceneFormatError
from sirlab.meshx import (
    EDGE_TABLE,
    TRI_TABLE,
    TriMesh,
    export_obj,
    marching_cubes,
    read_obj,
    sample_trilinear,
)


def _sphere_density(n=32, radius=10.0):
    c = (n - 1) / 2.0
    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    dist = np.sqrt((i - c) ** 2 + (j - c) ** 2 + (k - c) ** 2)
    return radius - dist, c


def test_tables_shape():
    """Test the lookup tables have the expected shapes"""
    assert EDGE_TABLE.shape == (256,)
    assert TRI_TABLE.shape == (256, 16)
    assert EDGE_TABLE[0] == 0 and EDGE_TABLE[255] == 0


def test_sphere_vertices_on_radius():
    """Every vertex of an analytic r=10 sphere lies within one voxel of r"""
    density, c = _sphere_density()
    mesh = marching_cubes(density, threshold=0.0)
    assert not mesh.is_empty
    r = np.linalg.norm(mesh.vertices - c, axis=1)
    assert np.all(np.abs(r - 10.0) < 1.0)


def test_sphere_mesh_is_closed():
    """Each edge of a closed surface is shared by exactly two triangles"""
    density, _ = _sphere_density(20, 6.0)
    mesh = marching_cubes(density, threshold=0.0)
    edges = np.sort(
        np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [2, 0]]]),
        axis=1,
    )
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_vertices_are_shared():
    """Test triangles share vertices and no vertex is duplicated"""
    density, _ = _sphere_density(16, 5.0)
    mesh = marching_cubes(density, threshold=0.0)
    assert mesh.n_vertices < 3 * mesh.n_triangles
    assert len(np.unique(mesh.vertices.round(9), axis=0)) == mesh.n_vertices


def test_empty_grid_gives_empty_mesh():
    """Test an all-zero grid meshes to nothing"""
    mesh = marching_cubes(np.zeros((8, 8, 8)), threshold=0.5)
    assert mesh.is_empty and mesh.n_vertices == 0


def test_full_grid_gives_empty_mesh():
    """Test a grid above threshold everywhere meshes to nothing"""
    mesh = marching_cubes(np.ones((8, 8, 8)), threshold=0.5)
    assert mesh.is_empty


def test_threshold_changes_size():
    """Test a higher threshold gives a smaller sphere"""
    density, c = _sphere_density(24, 8.0)
    small = marching_cubes(density, threshold=3.0)
    large = marching_cubes(density, threshold=0.0)
    assert np.linalg.norm(small.vertices - c, axis=1).mean() < np.linalg.norm(
        large.vertices - c, axis=1
    ).mean()


def test_vertex_colors_sampled():
    """Test vertex colors are sampled from the color grid"""
    density, _ = _sphere_density(12, 4.0)
    color = np.zeros((12, 12, 12, 3))
    color[..., 1] = 0.75
    mesh = marching_cubes(density, 0.0, color)
    assert mesh.colors is not None and mesh.colors.shape == (mesh.n_vertices, 3)
    np.testing.assert_allclose(mesh.colors[:, 1], 0.75)


def test_marching_cubes_needs_3d():
    """Test non-3D grids are rejected"""
    with pytest.raises(ParameterError):
        marching_cubes(np.zeros((4, 4)))
    with pytest.raises(ParameterError):
        marching_cubes(np.zeros((1, 4, 4)))


def test_sample_trilinear_linear_field():
    """Test trilinear sampling reproduces a linear field exactly"""
    i, j, k = np.meshgrid(np.arange(5), np.arange(5), np.arange(5), indexing="ij")
    grid = 2.0 * i + 3.0 * j - k
    pts = np.array([[0.5, 1.25, 3.75], [4.0, 0.0, 2.5]])
    np.testing.assert_allclose(sample_trilinear(grid, pts), 2 * pts[:, 0] + 3 * pts[:, 1] - pts[:, 2])


def test_trimesh_rejects_bad_indices():
    """Test triangles pointing past the vertex list are rejected"""
    with pytest.raises(ParameterError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


def _blob(seed, inner=5):
    """Random field in [0, 1] with a zero shell so the surface stays inside."""
    values = np.random.default_rng(seed).uniform(0.0, 1.0, size=(inner,) * 3)
    return np.pad(values, 1)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=10_000),
    threshold=st.floats(0.1, 0.9),
    offset=st.tuples(*(st.integers(0, 3) for _ in range(3))),
)
def test_translation_moves_vertices_by_offset(seed, threshold, offset):
    """Test shifting the grid by whole voxels shifts every vertex by the same offset"""
    density = _blob(seed)
    shifted = np.pad(density, [(a, 0) for a in offset])
    base = marching_cubes(density, threshold)
    moved = marching_cubes(shifted, threshold)
    assert moved.n_vertices == base.n_vertices
    np.testing.assert_array_equal(moved.triangles, base.triangles)
    np.testing.assert_allclose(moved.vertices, base.vertices + np.asarray(offset), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000), threshold=st.floats(0.1, 0.9))
def test_vertices_lie_on_the_iso_level(seed, threshold):
    """Test the trilinear density at every vertex equals the threshold"""
    density = _blob(seed)
    mesh = marching_cubes(density, threshold)
    assert not mesh.is_empty
    np.testing.assert_allclose(sample_trilinear(density, mesh.vertices), threshold, atol=1e-6)


# =============================================================================
# OBJ
# =============================================================================


def test_obj_round_trip(tmp_path):
    """Test a mesh written to OBJ reads back the same"""
    density, _ = _sphere_density(12, 4.0)
    mesh = marching_cubes(density, 0.0)
    path = export_obj(mesh, tmp_path / "sphere.obj")
    text = path.read_text()
    assert text.startswith(f"# sirlab mesh: {mesh.n_vertices} vertices")
    again = read_obj(path)
    assert again.n_vertices == mesh.n_vertices
    np.testing.assert_array_equal(again.triangles, mesh.triangles)
    np.testing.assert_allclose(again.vertices, mesh.vertices, atol=1e-6)


def test_obj_faces_one_based(tmp_path):
    """Test OBJ faces use one-based indices"""
    mesh = TriMesh(np.eye(3), np.array([[0, 1, 2]]))
    lines = export_obj(mesh, tmp_path / "tri.obj").read_text().splitlines()
    assert lines[-1] == "f 1 2 3"
    assert lines[1] == "v 1.000000 0.000000 0.000000"


def test_obj_colors_round_trip(tmp_path):
    """Test vertex colors survive an OBJ round trip"""
    mesh = TriMesh(np.eye(3), np.array([[0, 1, 2]]), np.full((3, 3), 0.5))
    again = read_obj(export_obj(mesh, tmp_path / "tri.obj"))
    np.testing.assert_allclose(again.colors, 0.5)


@pytest.mark.parametrize(
    "content",
    ["v 1 2\n", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3 4\n", "v 0 0 0\nf 1 2 3\n", "v a b c\n"],
)
def test_read_obj_rejects_malformed(tmp_path, content):
    """Test malformed OBJ lines are rejected"""
    path = tmp_path / "bad.obj"
    path.write_text(content)
    with pytest.raises(SceneFormatError):
        read_obj(path)


def test_read_obj_missing_file(tmp_path):
    """Test a missing OBJ file is a format error"""
    with pytest.raises(SceneFormatError):
        read_obj(tmp_path / "nope.obj")
