import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmfem.fem import (
    FeFunction,
    assemble_mass,
    assemble_stiffness,
    clement_interpolate,
    consistent_l2_inner,
    discrete_inner,
    load_vector,
    lumped_weights,
    modified_l2_projection,
    nodal_interpolate,
    simplex_gradients,
    triplets,
)
from hmfem.mesh import PerturbSpec, refined_mesh
from hmfem.quadrature import simplex_rule


def _monomial_integral(alpha):
    # int_{reference simplex} x^alpha = prod(alpha_i!) / (|alpha| + d)!
    d = len(alpha)
    return math.prod(math.factorial(a) for a in alpha) / math.factorial(sum(alpha) + d)


@pytest.mark.parametrize("d", [2, 3])
def test_quadrature_is_exact_to_degree_four(d):
    bary, w = simplex_rule(d, 4)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(bary >= 0)
    x = bary[:, 1:]
    volume = 1 / math.factorial(d)
    for alpha in np.ndindex(*(5,) * d):
        if sum(alpha) > 4:
            continue
        approx = volume * w @ np.prod(x ** np.array(alpha), axis=1)
        assert approx == pytest.approx(_monomial_integral(alpha), rel=1e-12, abs=1e-16)


def test_quadrature_is_not_exact_beyond_degree():
    bary, w = simplex_rule(2, 4)
    x = bary[:, 1:]
    approx = 0.5 * w @ (x[:, 0] ** 10)
    assert abs(approx - _monomial_integral((10, 0))) > 1e-8


@pytest.mark.parametrize("d", [2, 3])
def test_gradients_of_barycentric_coordinates(d):
    mesh = refined_mesh(d, 1, PerturbSpec(0.2, seed=4))
    grads = simplex_gradients(mesh)
    np.testing.assert_allclose(grads.sum(axis=1), 0.0, atol=1e-12)
    x = mesh.vertices[mesh.simplices]
    # grad lambda_i . (x_j - x_0) = delta_ij - delta_i0
    dots = np.einsum("sid,sjd->sij", grads, x[:, 1:] - x[:, :1])
    expected = np.vstack([-np.ones(d), np.eye(d)])
    np.testing.assert_allclose(dots, np.broadcast_to(expected, dots.shape), atol=1e-12)


def test_stiffness_interior_diagonal_is_five_point_stencil():
    for level in (2, 3, 4):
        mesh = refined_mesh(2, level)
        k = assemble_stiffness(mesh).tocsr()
        z = mesh.free_vertices
        np.testing.assert_allclose(k.diagonal()[z], 4.0, rtol=1e-13)
        # off-diagonal couplings along the diagonal direction vanish
        row = k[z[len(z) // 2]]
        vals = np.sort(row.data[np.abs(row.data) > 1e-14])
        np.testing.assert_allclose(vals, [-1, -1, -1, -1, 4], atol=1e-13)


@pytest.mark.parametrize("d", [2, 3])
def test_stiffness_properties(d):
    mesh = refined_mesh(d, 2, PerturbSpec(0.2, seed=1))
    k = assemble_stiffness(mesh)
    assert abs(k - k.T).max() < 1e-13
    np.testing.assert_allclose(k @ np.ones(mesh.n_vertices), 0.0, atol=1e-12)
    # exact on linear functions: |grad (a.x)|^2 = |a|^2
    a = np.arange(1, d + 1, dtype=float)
    v = mesh.vertices @ a
    assert v @ (k @ v) == pytest.approx(a @ a, rel=1e-12)


def test_vector_valued_matrices_are_block_expansions():
    mesh = refined_mesh(2, 2)
    k1, k3 = assemble_stiffness(mesh), assemble_stiffness(mesh, 3)
    m1, m3 = assemble_mass(mesh), assemble_mass(mesh, 3)
    assert k3.shape == (3 * mesh.n_vertices,) * 2
    np.testing.assert_allclose(k3[1::3, 1::3].toarray(), k1.toarray())
    assert abs(k3[0::3, 1::3]).max() == 0
    np.testing.assert_allclose(m3[2::3, 2::3].toarray(), m1.toarray())
    assert k3.has_sorted_indices


@pytest.mark.parametrize("d", [2, 3])
def test_mass_integrates_linear_products_exactly(d):
    mesh = refined_mesh(d, 2, PerturbSpec(0.1, seed=2))
    mass = assemble_mass(mesh)
    one = np.ones(mesh.n_vertices)
    assert one @ (mass @ one) == pytest.approx(1.0, rel=1e-12)
    x1 = mesh.vertices[:, 0]
    # int x_1^2 over the cube is 1/12
    assert x1 @ (mass @ x1) == pytest.approx(1 / 12, rel=1e-12)
    np.testing.assert_allclose(np.asarray(mass.sum(axis=1)).ravel(), lumped_weights(mesh), rtol=1e-12)


@pytest.mark.parametrize("level", [1, 2, 3, 4])
def test_lumped_weights_on_structured_mesh(level):
    mesh = refined_mesh(2, level)
    beta = lumped_weights(mesh)
    np.testing.assert_allclose(beta[mesh.free_vertices], 4.0**-level, rtol=1e-13)
    assert beta.sum() == pytest.approx(1.0)


def test_lumped_inner_product_is_nodal_quadrature():
    mesh = refined_mesh(2, 3)
    v = nodal_interpolate(lambda x: x[:, 0] + 2 * x[:, 1], mesh)
    w = nodal_interpolate(lambda x: np.ones(len(x)), mesh)
    # exact for the integral of a linear function
    assert discrete_inner(v, w) == pytest.approx(consistent_l2_inner(v, w), abs=1e-14)
    assert discrete_inner(v, v) > consistent_l2_inner(v, v)


def test_nodal_interpolation_shapes_and_validation():
    mesh = refined_mesh(2, 1)
    f = nodal_interpolate(lambda x: np.column_stack([x[:, 0], x[:, 1], x[:, 0] * x[:, 1]]), mesh, 3)
    assert f.values.shape == (9, 3)
    assert f.coefficients.shape == (27,)
    with pytest.raises(ValueError):
        nodal_interpolate(lambda x: x, mesh, 3)
    with pytest.raises(ValueError):
        nodal_interpolate(lambda x: np.where(x[:, 0] == 0, np.nan, x[:, 0]), mesh)


def test_fe_function_arithmetic():
    mesh = refined_mesh(2, 1)
    v = FeFunction(mesh, np.arange(9.0))
    w = 2 * v - v
    np.testing.assert_array_equal(w.values, v.values)
    with pytest.raises(ValueError):
        v + FeFunction(refined_mesh(2, 1), np.zeros(9))
    with pytest.raises(ValueError):
        v.values[0] = 1.0


def test_load_vector_matches_mass_for_linear_data():
    mesh = refined_mesh(2, 2, PerturbSpec(0.2, seed=5))
    f = lambda x: 1 + x[:, 0] - 3 * x[:, 1]
    exact = assemble_mass(mesh) @ f(mesh.vertices)
    np.testing.assert_allclose(load_vector(f, mesh)[:, 0], exact, atol=1e-15)
    np.testing.assert_allclose(load_vector(nodal_interpolate(f, mesh), mesh)[:, 0], exact, atol=1e-15)


@pytest.mark.parametrize("d", [2, 3])
def test_clement_and_projection_reproduce_polynomials(d):
    mesh = refined_mesh(d, 2)
    a = np.linspace(1, 2, d)
    f = lambda x: 0.3 + x @ a
    exact = f(mesh.vertices)
    free = mesh.free_vertices
    if d == 2:
        # interior patches of the structured triangle mesh are point-symmetric
        np.testing.assert_allclose(clement_interpolate(f, mesh).values[free, 0], exact[free], atol=1e-13)
        np.testing.assert_allclose(modified_l2_projection(f, mesh).values[free, 0], exact[free], atol=1e-13)
    const = clement_interpolate(lambda x: np.full(len(x), 2.5), mesh)
    np.testing.assert_allclose(const.values, 2.5, rtol=1e-13)
    zeroed = clement_interpolate(f, mesh, dirichlet=True)
    assert np.all(zeroed.values[mesh.boundary_vertex] == 0)


def test_projection_of_fe_function_tested_against_basis():
    mesh = refined_mesh(2, 3)
    v = nodal_interpolate(lambda x: np.sin(3 * x[:, 0]) * x[:, 1], mesh)
    p = modified_l2_projection(v, mesh)
    # (P v, phi_z)_h = (v, phi_z) for every z
    np.testing.assert_allclose(lumped_weights(mesh) * p.values[:, 0], assemble_mass(mesh) @ v.values[:, 0], atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), level=st.integers(2, 4))
def test_discrete_inner_dominates_consistent_on_average(seed, level):
    # the lumped and consistent L2 norms are equivalent with constants 1 and d+2
    mesh = refined_mesh(2, level)
    rng = np.random.default_rng(seed)
    v = FeFunction(mesh, rng.standard_normal(mesh.n_vertices))
    lumped = discrete_inner(v, v)
    exact = consistent_l2_inner(v, v)
    assert exact <= lumped + 1e-14
    assert lumped <= 4 * exact + 1e-14


def test_triplets_dump_is_sorted():
    mesh = refined_mesh(2, 1)
    t = triplets(assemble_stiffness(mesh))
    assert t.shape[1] == 3
    keys = t[:, 0] * 100 + t[:, 1]
    assert np.all(np.diff(keys) > 0)
