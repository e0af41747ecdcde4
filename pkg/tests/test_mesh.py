import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmfem.mesh import (
    MeshError,
    PerturbSpec,
    SimplicialMesh,
    base_mesh,
    check_conforming,
    mesh_size,
    read_mesh,
    refine_uniform,
    refined_mesh,
    simplex_quality,
    write_mesh,
)


@pytest.mark.parametrize("d,level", [(2, 0), (2, 1), (2, 3), (2, 5), (3, 0), (3, 1), (3, 2), (3, 3)])
def test_vertex_and_simplex_counts(d, level):
    mesh = refined_mesh(d, level)
    assert mesh.n_vertices == (2**level + 1) ** d
    assert mesh.n_simplices == math.factorial(d) * 2 ** (d * level)
    assert mesh.level == level


@pytest.mark.parametrize("d", [2, 3])
def test_refinement_is_conforming_and_volume_preserving(d):
    mesh = refined_mesh(d, 3 if d == 3 else 4)
    check_conforming(mesh)
    assert np.all(mesh.volumes > 0)
    assert mesh.volumes.sum() == pytest.approx(1.0, abs=1e-12)


def test_3d_refinement_has_finitely_many_shapes():
    # equal volumes and three shape classes from level 2 on, so quality is bounded below
    classes = []
    for level in range(1, 5):
        mesh = refined_mesh(3, level)
        np.testing.assert_allclose(mesh.volumes, 1 / (6 * 8**level), rtol=1e-12)
        q = simplex_quality(mesh.vertices, mesh.simplices)
        classes.append(np.unique(np.round(q, 10)))
    assert len(classes[0]) == 1
    for c in classes[2:]:
        np.testing.assert_allclose(c, classes[1], rtol=1e-9)


def test_mesh_sizes_halve():
    assert mesh_size(refined_mesh(2, 1)) == pytest.approx(math.sqrt(2) / 2)
    for d in (2, 3):
        h = [mesh_size(refined_mesh(d, k)) for k in range(4)]
        np.testing.assert_allclose(np.array(h[1:]) / h[:-1], 0.5, rtol=1e-12)


def test_boundary_flags_match_geometry():
    for d, level in ((2, 4), (3, 2)):
        mesh = refined_mesh(d, level)
        on_cube = (np.abs(mesh.vertices) == 0.5).any(axis=1)
        np.testing.assert_array_equal(mesh.boundary_vertex, on_cube)
        assert len(mesh.free_vertices) == (2**level - 1) ** d


def test_base_mesh_rejects_other_dimensions():
    with pytest.raises(MeshError):
        base_mesh(1)


def test_mesh_is_immutable():
    mesh = base_mesh(2)
    with pytest.raises(ValueError):
        mesh.vertices[0, 0] = 1.0


def test_orientation_is_normalized():
    mesh = base_mesh(2)
    flipped = SimplicialMesh(mesh.vertices, mesh.simplices[:, ::-1], mesh.boundary_vertex)
    assert np.all(flipped.volumes > 0)


def test_perturb_spec_validates_magnitude():
    with pytest.raises(MeshError):
        PerturbSpec(rho=0.25)
    with pytest.raises(MeshError):
        PerturbSpec(rho=-0.1)


def test_perturbed_refinement_is_reproducible():
    a = refined_mesh(2, 4, PerturbSpec(0.2, seed=7))
    b = refined_mesh(2, 4, PerturbSpec(0.2, seed=7))
    c = refined_mesh(2, 4, PerturbSpec(0.2, seed=8))
    assert a.vertices.tobytes() == b.vertices.tobytes()
    assert not np.array_equal(a.vertices, c.vertices)
    assert a.seeds == (7,) * 4


@pytest.mark.parametrize("d,level", [(2, 5), (3, 3)])
def test_perturbed_refinement_keeps_structure(d, level):
    plain = refined_mesh(d, level)
    mesh = refined_mesh(d, level, PerturbSpec(0.2, seed=3))
    assert mesh.n_vertices == plain.n_vertices
    assert mesh.n_simplices == plain.n_simplices
    assert mesh.boundary_vertex.sum() == plain.boundary_vertex.sum()
    # boundary vertices never leave the cube faces, interior ones never reach them
    on_cube = (np.abs(mesh.vertices) == 0.5).any(axis=1)
    np.testing.assert_array_equal(mesh.boundary_vertex, on_cube)
    if d == 2:
        # in 3D the inner diagonal, and with it the numbering, follows the perturbed geometry
        np.testing.assert_array_equal(mesh.simplices, plain.simplices)
        np.testing.assert_array_equal(mesh.vertices[mesh.boundary_vertex], plain.vertices[plain.boundary_vertex])
    check_conforming(mesh)
    assert mesh.volumes.sum() == pytest.approx(1.0, abs=1e-12)


def test_new_vertices_move_at_most_rho_times_parent_edge():
    coarse = refined_mesh(2, 3, PerturbSpec(0.2, seed=1))
    fine = refine_uniform(coarse, PerturbSpec(0.2, seed=1))
    plain = refine_uniform(coarse)
    shift = np.linalg.norm(fine.vertices - plain.vertices, axis=1)
    assert np.all(shift[: coarse.n_vertices] == 0)
    edge = np.linalg.norm(coarse.vertices[coarse.edges[:, 1]] - coarse.vertices[coarse.edges[:, 0]], axis=1)
    assert np.all(shift[coarse.n_vertices :] <= 0.2 * edge + 1e-15)
    assert shift.max() > 0


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), d=st.sampled_from([2, 3]))
def test_perturbed_mesh_size_stays_near_nominal(seed, d):
    level = 5 if d == 2 else 3
    nominal = mesh_size(refined_mesh(d, level))
    mesh = refined_mesh(d, level, PerturbSpec(0.2, seed=seed))
    assert 0.5 * nominal <= mesh.h_max <= 1.5 * nominal
    assert np.all(mesh.volumes > 0)


def test_mesh_file_round_trip(tmp_path):
    mesh = refined_mesh(3, 1, PerturbSpec(0.1, seed=2))
    path = tmp_path / "mesh.txt"
    write_mesh(mesh, path)
    back = read_mesh(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.simplices, mesh.simplices)
    np.testing.assert_array_equal(back.boundary_vertex, mesh.boundary_vertex)
    assert back.level == mesh.level


def test_read_mesh_rejects_truncated_file(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("2 4 2 0\n0 0 1\n")
    with pytest.raises((MeshError, ValueError)):
        read_mesh(path)


def test_check_conforming_detects_missing_simplex():
    mesh = refined_mesh(2, 2)
    broken = SimplicialMesh(mesh.vertices, mesh.simplices[1:], mesh.boundary_vertex)
    with pytest.raises(MeshError):
        check_conforming(broken)
