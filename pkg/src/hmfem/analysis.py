"""Error norms and experimental orders of convergence."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    FeFunction,
    _quadrature_points,
    assemble_mass,
    assemble_stiffness,
    discrete_inner,
    lumped_weights,
    modified_l2_projection,
    nodal_interpolate,
)
from .mesh import SimplicialMesh

__all__ = [
    "ErrorRecord",
    "h1_seminorm",
    "l2_norm",
    "lumped_l2_norm",
    "hm1_norm",
    "error_X",
    "eoc",
    "fill_eocs",
    "records_to_csv",
    "quadrature_control_constant",
    "projection_stability_constants",
    "CONVERGENCE_COLUMNS",
]

DENSE_EIG_LIMIT = 64

CONVERGENCE_COLUMNS = ["level", "n_vertices", "e_X", "eoc_lambda_l2", "eoc_lambda_hm1", "eoc_e_X"]


def h1_seminorm(v: FeFunction) -> float:
    """``sqrt(sum_T |T| |grad v|_T|^2)``."""
    grads = v.gradients()
    return math.sqrt(float(np.einsum("s,smd,smd->", v.mesh.volumes, grads, grads)))


def l2_norm(v: FeFunction) -> float:
    mass = assemble_mass(v.mesh)
    return math.sqrt(max(float(np.einsum("zi,zi->", v.values, mass @ v.values)), 0.0))


def _poisson_factor(mesh: SimplicialMesh):
    cached = mesh.__dict__.get("_poisson_lu")
    if cached is None:
        free = mesh.free_vertices
        k = assemble_stiffness(mesh)[free][:, free].tocsc()
        cached = spla.splu(k)
        mesh.__dict__["_poisson_lu"] = cached
    return cached


def hm1_norm(mu: FeFunction, mesh: SimplicialMesh | None = None, pairing: str = "consistent") -> float:
    """Discrete H^{-1} norm ``|grad w_h|`` where ``(grad w_h, grad phi) = <mu, phi>``.

    ``w_h`` and ``phi`` vanish on the boundary. ``pairing`` selects the exact
    L2 product (``"consistent"``) or the mass-lumped one (``"lumped"``) for
    the right-hand side.
    """
    mesh = mesh or mu.mesh
    if mu.m != 1:
        raise ValueError("hm1_norm expects a scalar function")
    if np.any(mu.values[mesh.boundary_vertex] != 0):
        raise ValueError("mu must vanish at boundary vertices")
    free = mesh.free_vertices
    if free.size == 0:
        return 0.0
    if pairing == "consistent":
        rhs = (assemble_mass(mesh) @ mu.values[:, 0])[free]
    elif pairing == "lumped":
        rhs = (lumped_weights(mesh) * mu.values[:, 0])[free]
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    w = _poisson_factor(mesh).solve(rhs)
    return math.sqrt(max(float(w @ rhs), 0.0))


def lumped_l2_norm(v: FeFunction) -> float:
    return math.sqrt(max(discrete_inner(v, v), 0.0))


@dataclass
class ErrorRecord:
    """Discrete errors on one mesh level.

    ``e_lambda_l2`` is the lumped L2 norm of ``lam_h - I_h lam`` including the
    boundary nodes, where ``lam_h`` vanishes but ``lam`` does not;
    ``e_lambda_hm1`` is the discrete H^-1 norm (lumped pairing) of
    ``lam_h - I_{h,D} lam``. ``e_lambda_l2_interior`` is the exact L2 norm of
    ``lam_h - I_{h,D} lam`` and is reported for reference only.
    """

    level: int
    n_vertices: int
    h: float
    e_u_h1: float
    e_lambda_l2: float
    e_lambda_hm1: float
    e_lambda_l2_interior: float = float("nan")
    e_X: float = field(init=False)
    eoc_lambda_l2: float = 0.0
    eoc_lambda_hm1: float = 0.0
    eoc_e_X: float = 0.0

    def __post_init__(self):
        self.e_X = self.e_u_h1 + self.e_lambda_hm1

    def as_dict(self) -> dict:
        return asdict(self)


def error_X(
    state,
    exact_u: Callable,
    exact_lambda: Callable,
    h: float | None = None,
    hm1_pairing: str = "lumped",
) -> ErrorRecord:
    """Discrete errors against nodal interpolants of the exact pair."""
    mesh = state.mesh
    iu = nodal_interpolate(exact_u, mesh, state.u.m)
    ilam = nodal_interpolate(exact_lambda, mesh, 1)
    ilam_d = ilam.values.copy()
    ilam_d[mesh.boundary_vertex] = 0.0
    e_u = state.u - iu
    e_lam_d = state.lam - FeFunction(mesh, ilam_d)
    return ErrorRecord(
        level=mesh.level,
        n_vertices=mesh.n_vertices,
        h=mesh.h_max if h is None else h,
        e_u_h1=h1_seminorm(e_u),
        e_lambda_l2=lumped_l2_norm(state.lam - ilam),
        e_lambda_hm1=hm1_norm(e_lam_d, mesh, pairing=hm1_pairing),
        e_lambda_l2_interior=l2_norm(e_lam_d),
    )


def eoc(values: Sequence[float], h: Sequence[float]) -> list[float]:
    """Logarithmic slopes ``log(d_l/d_{l-1}) / log(h_l/h_{l-1})``; the first entry is 0.0."""
    v = np.asarray(values, dtype=float)
    hh = np.asarray(h, dtype=float)
    if v.shape != hh.shape or v.ndim != 1 or len(v) < 2:
        raise ValueError("eoc needs two sequences of equal length >= 2")
    if np.any(~(v > 0)) or np.any(~(hh > 0)):
        raise ValueError("eoc needs strictly positive values and mesh sizes")
    rates = np.log(v[1:] / v[:-1]) / np.log(hh[1:] / hh[:-1])
    return [0.0] + [float(r) for r in rates]


def fill_eocs(records: list[ErrorRecord]) -> list[ErrorRecord]:
    """Populate the eoc fields of consecutive records in place."""
    if len(records) < 2:
        return records
    h = [r.h for r in records]
    for name in ("lambda_l2", "lambda_hm1"):
        rates = eoc([getattr(r, f"e_{name}") for r in records], h)
        for r, q in zip(records, rates):
            setattr(r, f"eoc_{name}", q)
    for r, q in zip(records, eoc([r.e_X for r in records], h)):
        r.eoc_e_X = q
    return records


def records_to_csv(records: list[ErrorRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONVERGENCE_COLUMNS)
    for r in records:
        w.writerow([r.level, r.n_vertices] + [repr(float(getattr(r, c))) for c in CONVERGENCE_COLUMNS[2:]])
    return buf.getvalue()


def _top_eigenvalue(apply, mesh: SimplicialMesh, seed: int) -> float:
    """Largest s with ``A x = s K x`` over free nodes, ``A`` given by ``apply``."""
    free = mesh.free_vertices
    n = len(free)
    k_lu = _poisson_factor(mesh)
    a = spla.LinearOperator((n, n), matvec=lambda x: apply(np.ravel(x)), dtype=float)
    k_inv = spla.LinearOperator((n, n), matvec=lambda x: k_lu.solve(np.ravel(x)), dtype=float)
    k_ff = assemble_stiffness(mesh)[free][:, free]
    if n <= DENSE_EIG_LIMIT:
        a_dense = np.column_stack([apply(e) for e in np.eye(n)])
        return max(float(sla.eigh(0.5 * (a_dense + a_dense.T), k_ff.toarray(), eigvals_only=True)[-1]), 0.0)
    v0 = np.random.default_rng(seed).standard_normal(n)
    top = spla.eigsh(a, k=1, M=k_ff, Minv=k_inv, v0=v0, which="LA", return_eigenvectors=False, tol=1e-8)
    return max(float(top[0]), 0.0)


def quadrature_control_constant(mesh: SimplicialMesh, seed: int = 0) -> float:
    """Smallest c with ``|(psi, phi)_h - (psi, phi)| <= c h |psi| |grad phi|``.

    ``psi`` ranges over P1 functions, ``phi`` over P1 functions vanishing on
    the boundary, and h is the longest edge. The supremum squared is the top
    eigenvalue of ``C^T M^{-1} C phi = s K phi`` with ``C = B - M`` (lumped
    minus consistent mass); Lanczos starts from a random vector.
    """
    mass = assemble_mass(mesh).tocsc()
    c = (sp.diags(lumped_weights(mesh)) - mass).tocsr()[:, mesh.free_vertices]
    m_lu = spla.splu(mass)
    top = _top_eigenvalue(lambda x: c.T @ m_lu.solve(c @ x), mesh, seed)
    return math.sqrt(top) / mesh.h_max


def projection_stability_constants(mesh: SimplicialMesh, seed: int = 0) -> tuple[float, float]:
    """Constants of the lumped projection ``P`` with zero boundary values.

    Returns the smallest ``c1, c2`` with ``|grad P v| <= c1 |grad v|`` and
    ``|P v - v| <= c2 h |grad v|`` for all P1 functions v vanishing on the
    boundary. There ``P v = B^{-1} M v`` at the free nodes.
    """
    free = mesh.free_vertices
    mass = assemble_mass(mesh)[free][:, free].tocsr()
    k_ff = assemble_stiffness(mesh)[free][:, free].tocsr()
    beta = lumped_weights(mesh)[free]

    def project(x):
        return (mass @ x) / beta

    def stab(x):
        return mass @ ((k_ff @ project(x)) / beta)

    def approx(x):
        r = project(x) - x
        return mass @ ((mass @ r) / beta) - mass @ r

    c1 = math.sqrt(_top_eigenvalue(stab, mesh, seed))
    c2 = math.sqrt(_top_eigenvalue(approx, mesh, seed)) / mesh.h_max
    return c1, c2
