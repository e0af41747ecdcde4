"""P1 finite element spaces on simplicial meshes.

Vector-valued functions are stored as ``(n_vertices, m)`` arrays; flattened
they are node-major, component-minor, which is the ordering used by every
vector-valued matrix assembled here (``kron(K, I_m)``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import SimplicialMesh
from .quadrature import simplex_rule

__all__ = [
    "FeFunction",
    "simplex_gradients",
    "assemble_stiffness",
    "assemble_mass",
    "lumped_weights",
    "nodal_interpolate",
    "discrete_inner",
    "consistent_l2_inner",
    "clement_interpolate",
    "modified_l2_projection",
    "load_vector",
    "triplets",
]

DATA_QUADRATURE_DEGREE = 4


@dataclass(frozen=True, eq=False)
class FeFunction:
    """An m-vector valued P1 function given by its nodal values."""

    mesh: SimplicialMesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.mesh.n_vertices:
            raise ValueError(
                f"expected {self.mesh.n_vertices} nodal values, got {v.shape[0]}"
            )
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def coefficients(self) -> np.ndarray:
        """Flat coefficient vector, node-major."""
        return self.values.ravel()

    def at_barycentric(self, bary: np.ndarray) -> np.ndarray:
        """Values at barycentric points ``bary`` (q, d+1) in every simplex -> (ns, q, m)."""
        local = self.values[self.mesh.simplices]  # (ns, d+1, m)
        return np.einsum("qi,sim->sqm", bary, local)

    def gradients(self) -> np.ndarray:
        """Elementwise constant gradients, shape (ns, m, d)."""
        grads = simplex_gradients(self.mesh)  # (ns, d+1, d)
        local = self.values[self.mesh.simplices]
        return np.einsum("sim,sid->smd", local, grads)

    def __add__(self, other: "FeFunction") -> "FeFunction":
        _check_pair(self, other)
        return FeFunction(self.mesh, self.values + other.values)

    def __sub__(self, other: "FeFunction") -> "FeFunction":
        _check_pair(self, other)
        return FeFunction(self.mesh, self.values - other.values)

    def __mul__(self, alpha: float) -> "FeFunction":
        return FeFunction(self.mesh, alpha * self.values)

    __rmul__ = __mul__


def _check_pair(v: FeFunction, w: FeFunction) -> None:
    if v.mesh is not w.mesh:
        raise ValueError("functions live on different meshes")
    if v.m != w.m:
        raise ValueError(f"value dimensions differ: {v.m} != {w.m}")


def simplex_gradients(mesh: SimplicialMesh) -> np.ndarray:
    """Gradients of the barycentric coordinates, shape (ns, d+1, d)."""
    cached = mesh.__dict__.get("_p1_gradients")
    if cached is not None:
        return cached
    x = mesh.vertices[mesh.simplices]
    jac = x[:, 1:, :] - x[:, :1, :]  # rows are edge vectors
    if np.any(mesh.volumes <= 0):
        raise ValueError("degenerate simplex in mesh")
    inv = np.linalg.inv(jac)  # columns are gradients of lambda_1..lambda_d
    g = np.transpose(inv, (0, 2, 1))
    grads = np.concatenate([-g.sum(axis=1, keepdims=True), g], axis=1)
    grads.setflags(write=False)
    mesh.__dict__["_p1_gradients"] = grads
    return grads


def _scatter(mesh: SimplicialMesh, local: np.ndarray) -> sp.csr_matrix:
    s = mesh.simplices
    k = s.shape[1]
    rows = np.repeat(s, k, axis=1).ravel()
    cols = np.tile(s, (1, k)).ravel()
    n = mesh.n_vertices
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def _expand(mat: sp.csr_matrix, m: int) -> sp.csr_matrix:
    if m == 1:
        return mat
    out = sp.kron(mat, sp.identity(m, format="csr"), format="csr")
    out.sort_indices()
    return out


def assemble_stiffness(mesh: SimplicialMesh, m: int = 1) -> sp.csr_matrix:
    """Exact P1 stiffness matrix ``(grad phi_z, grad phi_y)``, expanded to m components."""
    grads = simplex_gradients(mesh)
    local = mesh.volumes[:, None, None] * np.einsum("sid,sjd->sij", grads, grads)
    return _expand(_scatter(mesh, local), m)


def assemble_mass(mesh: SimplicialMesh, m: int = 1) -> sp.csr_matrix:
    """Consistent P1 mass matrix (exact for products of P1 functions)."""
    d = mesh.dim
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    local = mesh.volumes[:, None, None] * ref[None]
    return _expand(_scatter(mesh, local), m)


def lumped_weights(mesh: SimplicialMesh) -> np.ndarray:
    """``beta_z = int phi_z dx``, i.e. the sum of |T|/(d+1) over the patch of z."""
    d = mesh.dim
    share = np.repeat(mesh.volumes / (d + 1), d + 1)
    return np.bincount(mesh.simplices.ravel(), weights=share, minlength=mesh.n_vertices)


def nodal_interpolate(f: Callable, mesh: SimplicialMesh, m: int | None = None) -> FeFunction:
    """Nodal interpolant of ``f``; ``f`` maps an (n, d) array of points to (n,) or (n, m)."""
    values = np.asarray(f(mesh.vertices), dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if m is not None and values.shape[1] != m:
        raise ValueError(f"function returned {values.shape[1]} components, expected {m}")
    if not np.all(np.isfinite(values)):
        raise ValueError("function is not finite at every vertex")
    return FeFunction(mesh, values)


def discrete_inner(v: FeFunction, w: FeFunction) -> float:
    """Mass-lumped inner product ``sum_z beta_z v(z) . w(z)``."""
    _check_pair(v, w)
    beta = lumped_weights(v.mesh)
    return float(beta @ np.einsum("zi,zi->z", v.values, w.values))


def consistent_l2_inner(v: FeFunction, w: FeFunction) -> float:
    """Exact L2 inner product of two P1 functions."""
    _check_pair(v, w)
    mass = assemble_mass(v.mesh)
    return float(np.einsum("zi,zi->", v.values, mass @ w.values))


def _quadrature_points(mesh: SimplicialMesh, degree: int):
    bary, w = simplex_rule(mesh.dim, degree)
    x = np.einsum("qi,sid->sqd", bary, mesh.vertices[mesh.simplices])
    return bary, w, x


def _evaluate(f: Callable, x: np.ndarray) -> np.ndarray:
    ns, q, d = x.shape
    vals = np.asarray(f(x.reshape(-1, d)), dtype=float)
    return vals.reshape(ns, q, -1)


def load_vector(f, mesh: SimplicialMesh, degree: int = DATA_QUADRATURE_DEGREE) -> np.ndarray:
    """``(f, phi_z)`` for every vertex z, shape (nv, m).

    ``f`` is either an FeFunction (integrated exactly) or a callable on points.
    """
    if isinstance(f, FeFunction):
        return assemble_mass(mesh) @ f.values
    bary, w, x = _quadrature_points(mesh, degree)
    vals = _evaluate(f, x)  # (ns, q, m)
    local = mesh.volumes[:, None, None] * np.einsum("q,qi,sqm->sim", w, bary, vals)
    out = np.zeros((mesh.n_vertices, vals.shape[2]))
    np.add.at(out, mesh.simplices.ravel(), local.reshape(-1, vals.shape[2]))
    return out


def _simplex_integrals(alpha, mesh: SimplicialMesh) -> np.ndarray:
    if isinstance(alpha, FeFunction):
        return mesh.volumes[:, None] * alpha.values[mesh.simplices].mean(axis=1)
    _, w, x = _quadrature_points(mesh, DATA_QUADRATURE_DEGREE)
    vals = _evaluate(alpha, x)
    return mesh.volumes[:, None] * np.einsum("q,sqm->sm", w, vals)


def clement_interpolate(alpha, mesh: SimplicialMesh, dirichlet: bool = False) -> FeFunction:
    """Clement quasi-interpolant: nodal value = mean of alpha over the vertex patch."""
    integrals = _simplex_integrals(alpha, mesh)  # (ns, m)
    k = mesh.dim + 1
    idx = mesh.simplices.ravel()
    patch_int = np.zeros((mesh.n_vertices, integrals.shape[1]))
    np.add.at(patch_int, idx, np.repeat(integrals, k, axis=0))
    patch_vol = np.bincount(idx, weights=np.repeat(mesh.volumes, k), minlength=mesh.n_vertices)
    values = patch_int / patch_vol[:, None]
    if dirichlet:
        values[mesh.boundary_vertex] = 0.0
    return FeFunction(mesh, values)


def modified_l2_projection(v, mesh: SimplicialMesh, dirichlet: bool = False) -> FeFunction:
    """Projection with respect to the lumped inner product: ``beta_z^{-1} (v, phi_z)``."""
    values = load_vector(v, mesh) / lumped_weights(mesh)[:, None]
    if dirichlet:
        values[mesh.boundary_vertex] = 0.0
    return FeFunction(mesh, values)


def triplets(mat: sp.spmatrix) -> np.ndarray:
    """Debug dump ``(row, col, value)`` of the stored entries, row-major."""
    coo = sp.csr_matrix(mat).tocoo()
    order = np.lexsort((coo.col, coo.row))
    return np.column_stack([coo.row[order], coo.col[order], coo.data[order]])
