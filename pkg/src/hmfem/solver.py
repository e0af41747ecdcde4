"""Newton's method for discrete harmonic maps into level-set hypersurfaces.

Discrete harmonic maps are stationary points of

    L_h(u, lam) = 1/2 |grad u|^2 + 1/2 (lam, g(u))_h

over pairs with fixed Dirichlet values of u and lam = 0 on the boundary,
where ``(., .)_h`` is the mass-lumped inner product. For the unit sphere this
gives lam = -|grad u|^2 in the continuous limit.

Unknowns on free (interior) nodes are ordered u first (node-major,
component-minor) and lam second. The Jacobian is the symmetric saddle-point
matrix ``[[A, B^T], [B, 0]]`` whose zero-order parts are node-local.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pyamg
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import FeFunction, assemble_mass, assemble_stiffness, lumped_weights, nodal_interpolate
from .manifolds import TargetManifold
from .mesh import SimplicialMesh

__all__ = [
    "NewtonFailure",
    "LinearSolveFailure",
    "BoundaryData",
    "SaddleState",
    "IterationRecord",
    "NewtonTrace",
    "make_state",
    "assemble_residual",
    "assemble_jacobian",
    "solve_kkt",
    "newton_solve",
    "residual_euclidean_norm",
    "correction_norm",
    "infsup_diagnostic",
    "constraint_block",
    "energy",
]

log = logging.getLogger(__name__)

EPS_STOP = 1e-10
MAX_ITER = 25
KKT_RTOL = 1e-10
DIVERGENCE_LIMIT = 1e8
INFSUP_MAX_FREE = 2000
AUTO_KRYLOV_UNKNOWNS = 50_000


class NewtonFailure(RuntimeError):
    """Raised when a Newton step cannot be computed."""


class LinearSolveFailure(NewtonFailure):
    def __init__(self, message: str, iteration: int | None = None, residual: float | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.residual = residual


@dataclass(frozen=True)
class BoundaryData:
    """Dirichlet data ``u_D`` and its nodal values on a mesh."""

    func: Callable
    mesh: SimplicialMesh
    values: np.ndarray  # (nv, m); only boundary rows are meaningful

    @classmethod
    def interpolate(cls, func: Callable, mesh: SimplicialMesh) -> "BoundaryData":
        return cls(func, mesh, nodal_interpolate(func, mesh).values)

    def check(self, manifold: TargetManifold, tol: float = 1e-12) -> None:
        g = manifold.value(self.values[self.mesh.boundary_vertex])
        worst = float(np.max(np.abs(g), initial=0.0))
        if worst > tol:
            raise ValueError(f"boundary data violates the constraint by {worst:.3e}")


@dataclass(frozen=True, eq=False)
class SaddleState:
    """Pair (u_h, lam_h) with lam_h vanishing on the boundary."""

    u: FeFunction
    lam: FeFunction
    manifold: TargetManifold

    def __post_init__(self):
        if self.u.mesh is not self.lam.mesh:
            raise ValueError("u and lambda live on different meshes")
        if self.lam.m != 1:
            raise ValueError("lambda must be scalar")
        if self.u.m != self.manifold.m:
            raise ValueError(f"u has {self.u.m} components but the manifold lives in R^{self.manifold.m}")
        if np.any(self.lam.values[self.mesh.boundary_vertex] != 0.0):
            raise ValueError("lambda must vanish at boundary vertices")

    @property
    def mesh(self) -> SimplicialMesh:
        return self.u.mesh

    def check_boundary(self, data: BoundaryData) -> None:
        b = self.mesh.boundary_vertex
        if not np.array_equal(self.u.values[b], data.values[b]):
            raise ValueError("u does not match the boundary data")

    def with_free(self, u_free: np.ndarray, lam_free: np.ndarray) -> "SaddleState":
        free = self.mesh.free_vertices
        u = self.u.values.copy()
        lam = self.lam.values.copy()
        u[free] = u_free.reshape(len(free), -1)
        lam[free, 0] = lam_free
        return SaddleState(FeFunction(self.mesh, u), FeFunction(self.mesh, lam), self.manifold)


def make_state(u: FeFunction | np.ndarray, lam, manifold: TargetManifold, mesh: SimplicialMesh | None = None) -> SaddleState:
    """Build a state, zeroing lambda at boundary vertices."""
    if not isinstance(u, FeFunction):
        u = FeFunction(mesh, u)
    mesh = u.mesh
    lam_values = lam.values if isinstance(lam, FeFunction) else np.asarray(lam, dtype=float)
    lam_values = lam_values.reshape(mesh.n_vertices, 1).copy()
    lam_values[mesh.boundary_vertex] = 0.0
    return SaddleState(u, FeFunction(mesh, lam_values), manifold)


class _Operators:
    """Per-mesh matrices restricted to free nodes."""

    def __init__(self, mesh: SimplicialMesh):
        self.free = mesh.free_vertices
        self.stiffness = assemble_stiffness(mesh)
        self.k_ff = self.stiffness[self.free][:, self.free].tocsr()
        self.m_ff = assemble_mass(mesh)[self.free][:, self.free].tocsr()
        self.beta = lumped_weights(mesh)
        self.beta_f = self.beta[self.free]


def _operators(mesh: SimplicialMesh) -> _Operators:
    ops = mesh.__dict__.get("_hm_operators")
    if ops is None:
        ops = _Operators(mesh)
        mesh.__dict__["_hm_operators"] = ops
    return ops


def assemble_residual(state: SaddleState) -> np.ndarray:
    """Residual tested with the free nodal basis: ``[F_u (nf*m), F_lam (nf)]``."""
    ops = _operators(state.mesh)
    g = state.manifold
    u = state.u.values
    u_f = u[ops.free]
    lam_f = state.lam.values[ops.free, 0]
    f_u = (ops.stiffness @ u)[ops.free] + 0.5 * (ops.beta_f * lam_f)[:, None] * g.gradient(u_f)
    f_lam = 0.5 * ops.beta_f * g.value(u_f)
    return np.concatenate([f_u.ravel(), f_lam])


def constraint_block(residual: np.ndarray, state: SaddleState) -> np.ndarray:
    n_u = len(state.mesh.free_vertices) * state.u.m
    return residual[n_u:]


def residual_euclidean_norm(state: SaddleState) -> float:
    return float(np.linalg.norm(assemble_residual(state)))


def _b_block(state: SaddleState, ops: _Operators) -> sp.csr_matrix:
    m = state.u.m
    nf = len(ops.free)
    dg = state.manifold.gradient(state.u.values[ops.free])  # (nf, m)
    vals = 0.5 * ops.beta_f[:, None] * dg
    rows = np.repeat(np.arange(nf), m)
    cols = np.arange(nf * m)
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(nf, nf * m))


def assemble_jacobian(state: SaddleState) -> sp.csr_matrix:
    """Symmetric Jacobian ``[[A(lam), B(u)^T], [B(u), 0]]`` on free nodes."""
    ops = _operators(state.mesh)
    m = state.u.m
    nf = len(ops.free)
    u_f = state.u.values[ops.free]
    lam_f = state.lam.values[ops.free, 0]
    hess = state.manifold.hessian(u_f)  # (nf, m, m)
    local = 0.5 * (ops.beta_f * lam_f)[:, None, None] * hess
    base = np.arange(nf)[:, None, None] * m
    rows = np.broadcast_to(base + np.arange(m)[None, :, None], local.shape)
    cols = np.broadcast_to(base + np.arange(m)[None, None, :], local.shape)
    zero_order = sp.csr_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(nf * m, nf * m))
    a = sp.kron(ops.k_ff, sp.identity(m), format="csr") + zero_order
    b = _b_block(state, ops)
    jac = sp.bmat([[a, b.T], [b, None]], format="csr")
    jac.sort_indices()
    return jac


def _nullspace_solve(jac: sp.csr_matrix, rhs: np.ndarray, n_u: int, m: int) -> np.ndarray:
    """Eliminate the node-local constraint rows and solve the reduced system.

    B has one row per free node with support on that node's m components.
    Writing each nodal u-correction as a tangential part plus a multiple of
    the constraint row turns the saddle-point system into a symmetric system
    for the tangential components only.
    """
    a = jac[:n_u, :n_u]
    b = jac[n_u:, :n_u]
    nf = n_u // m
    f, r = rhs[:n_u], rhs[n_u:]
    rows = np.asarray(b.sum(axis=0)).reshape(nf, m)  # each column holds one entry
    bb = np.einsum("ij,ij->i", rows, rows)
    if np.any(bb == 0):
        raise LinearSolveFailure("constraint row vanishes at a node")
    normal = rows / np.sqrt(bb)[:, None]
    # orthonormal tangent frame per node via Householder reflections
    e = np.zeros(m)
    e[0] = 1.0
    sign = np.where(normal[:, 0] > 0, 1.0, -1.0)
    v = normal + sign[:, None] * e  # reflector mapping normal to -sign*e
    vv = np.einsum("ij,ij->i", v, v)
    house = np.eye(m)[None] - 2.0 * v[:, :, None] * v[:, None, :] / vv[:, None, None]
    tangent = house[:, :, 1:]  # (nf, m, m-1), columns orthogonal to normal
    q = sp.block_diag(list(tangent), format="csr")
    # normal part fixed by the constraint: b_z . d_z = r_z
    d_normal = (normal * (r / np.sqrt(bb))[:, None]).ravel()
    red = (q.T @ a @ q).tocsr()
    red_rhs = q.T @ (f - a @ d_normal)
    t = _reduced_solve(red, red_rhs)
    d = q @ t + d_normal
    resid_u = f - a @ d
    # multiplier from the normal component of the first block row
    delta = np.einsum("ij,ij->i", normal, resid_u.reshape(nf, m)) / np.sqrt(bb)
    return np.concatenate([d, delta])


def _reduced_solve(red: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
    """GMRES on the reduced system, AMG-preconditioned with an ILU fallback."""
    norm = np.linalg.norm(rhs)
    if norm == 0:
        return np.zeros_like(rhs)
    try:
        ml = pyamg.smoothed_aggregation_solver(red, symmetry="symmetric")
        t, info = spla.gmres(red, rhs, M=ml.aspreconditioner(), rtol=1e-13, atol=0.0, restart=100, maxiter=5)
        if info == 0 and np.linalg.norm(red @ t - rhs) <= 1e-12 * norm:
            return t
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.debug("AMG preconditioner failed: %s", exc)
    ilu = spla.spilu(red.tocsc(), drop_tol=1e-5, fill_factor=20)
    pre = spla.LinearOperator(red.shape, ilu.solve)
    t, info = spla.gmres(red, rhs, M=pre, rtol=1e-13, atol=0.0, restart=200, maxiter=20)
    if info != 0:
        raise LinearSolveFailure(f"reduced Krylov solve did not converge (info={info})")
    return t


def solve_kkt(
    jac: sp.spmatrix,
    rhs: np.ndarray,
    method: str = "direct",
    rtol: float = KKT_RTOL,
    m: int | None = None,
) -> np.ndarray:
    """Solve the saddle-point system to relative residual ``rtol``.

    ``method="direct"`` uses a sparse LU factorization with up to three steps
    of iterative refinement; ``method="krylov"`` eliminates the node-local
    constraint and solves the reduced system with AMG-preconditioned GMRES
    (requires ``m``, the number of u components per node), falling back to
    an incomplete LU preconditioner when the AMG-preconditioned iteration
    stalls.
    """
    jac = sp.csr_matrix(jac)
    if jac.shape[0] != jac.shape[1] or jac.shape[0] != len(rhs):
        raise ValueError("system dimensions do not match")
    norm_rhs = np.linalg.norm(rhs)
    if norm_rhs == 0:
        return np.zeros_like(rhs)
    try:
        if method == "direct":
            lu = spla.splu(jac.tocsc())
            x = lu.solve(rhs)
            for _ in range(3):
                r = rhs - jac @ x
                if np.linalg.norm(r) <= rtol * norm_rhs:
                    break
                x = x + lu.solve(r)
        elif method == "krylov":
            if m is None:
                raise ValueError("krylov method needs the number of components m")
            n_lam = jac.shape[0] // (m + 1)
            x = _nullspace_solve(jac, rhs, jac.shape[0] - n_lam, m)
        else:
            raise ValueError(f"unknown linear solver {method!r}")
    except RuntimeError as exc:  # singular factor
        if isinstance(exc, LinearSolveFailure):
            raise
        raise LinearSolveFailure(f"factorization failed: {exc}") from exc
    res = np.linalg.norm(rhs - jac @ x)
    if not np.all(np.isfinite(x)) or res > rtol * norm_rhs:
        raise LinearSolveFailure(
            f"relative residual {res / norm_rhs:.3e} exceeds {rtol:.1e}", residual=res / norm_rhs
        )
    return x


def correction_norm(state: SaddleState, correction: np.ndarray) -> float:
    """``|grad d| + |delta|`` with the L2 norm for the multiplier part."""
    ops = _operators(state.mesh)
    m = state.u.m
    n_u = len(ops.free) * m
    d = correction[:n_u].reshape(-1, m)
    delta = correction[n_u:]
    h1 = np.sqrt(max(float(np.einsum("ij,ij->", d, ops.k_ff @ d)), 0.0))
    l2 = np.sqrt(max(float(delta @ (ops.m_ff @ delta)), 0.0))
    return h1 + l2


@dataclass
class IterationRecord:
    step: int
    correction_norm: float
    residual_norm: float
    seconds: float


@dataclass
class NewtonTrace:
    """Per-step history of a Newton run.

    Record 0 holds the initial residual; record j >= 1 holds the norm of the
    j-th correction and the residual of the updated iterate. Corrections are
    indexed from 0, and ``iterations`` is the index of the correction that met
    the stopping rule, i.e. one less than the number of linear solves.
    """

    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    status: str = "running"
    failed_at: int | None = None

    @property
    def solves(self) -> int:
        return max(len(self.records) - 1, 0)

    @property
    def iterations(self) -> int:
        return self.solves - 1 if self.converged else self.solves

    @property
    def residuals(self) -> np.ndarray:
        return np.array([r.residual_norm for r in self.records])

    @property
    def corrections(self) -> np.ndarray:
        return np.array([r.correction_norm for r in self.records[1:]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "correction_norm", "residual_norm", "seconds"])
        for r in self.records:
            w.writerow([r.step, repr(r.correction_norm), repr(r.residual_norm), f"{r.seconds:.6f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "solves": self.solves,
            "converged": self.converged,
            "status": self.status,
            "final_correction": self.records[-1].correction_norm if len(self.records) > 1 else None,
            "final_residual": self.records[-1].residual_norm if self.records else None,
        }


def newton_solve(
    initial: SaddleState,
    eps_stop: float = EPS_STOP,
    max_iter: int = MAX_ITER,
    linear_solver: str = "auto",
    allow_nonquadratic_3d: bool = False,
) -> tuple[SaddleState, NewtonTrace]:
    """Plain Newton iteration without damping or line search.

    Stops once ``|grad d_k| + |delta_k| <= eps_stop`` for some correction
    index ``k <= max_iter``, so at most ``max_iter + 1`` linear solves are
    made. Non-convergence, non-finite iterates, or corrections beyond
    ``DIVERGENCE_LIMIT`` end the run with ``trace.converged = False``.
    A failed linear solve raises ``LinearSolveFailure`` carrying the step index.

    ``linear_solver="auto"`` picks the sparse LU for two-dimensional problems
    and small 3D problems, and the constraint-eliminating Krylov solver for 3D
    systems above ``AUTO_KRYLOV_UNKNOWNS`` unknowns.
    """
    if eps_stop <= 0:
        raise ValueError("eps_stop must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    manifold = initial.manifold
    if initial.mesh.dim == 3 and not manifold.quadratic and not allow_nonquadratic_3d:
        raise ValueError(
            "non-quadratic targets in three dimensions are refused; pass allow_nonquadratic_3d=True"
        )
    m = initial.u.m
    ops = _operators(initial.mesh)
    n_u = len(ops.free) * m
    if linear_solver == "auto":
        big = initial.mesh.dim == 3 and n_u + len(ops.free) > AUTO_KRYLOV_UNKNOWNS
        linear_solver = "krylov" if big else "direct"

    start = time.perf_counter()
    state = initial
    residual = assemble_residual(state)
    trace = NewtonTrace()
    trace.records.append(IterationRecord(0, float("nan"), float(np.linalg.norm(residual)), 0.0))
    for k in range(1, max_iter + 2):
        jac = assemble_jacobian(state)
        try:
            step = solve_kkt(jac, -residual, method=linear_solver, m=m)
        except LinearSolveFailure as exc:
            exc.iteration = k
            trace.status = "linear_solve_failed"
            trace.failed_at = k
            raise
        size = correction_norm(state, step)
        u_free = state.u.values[ops.free].ravel() + step[:n_u]
        lam_free = state.lam.values[ops.free, 0] + step[n_u:]
        state = state.with_free(u_free, lam_free)
        residual = assemble_residual(state)
        res_norm = float(np.linalg.norm(residual))
        trace.records.append(IterationRecord(k, size, res_norm, time.perf_counter() - start))
        log.debug("newton step %d: correction %.3e residual %.3e", k, size, res_norm)
        if not (np.isfinite(size) and np.isfinite(res_norm)) or size > DIVERGENCE_LIMIT:
            trace.status = "diverged"
            return state, trace
        if size <= eps_stop:
            trace.converged = True
            trace.status = "converged"
            return state, trace
    trace.status = "max_iter"
    return state, trace


def energy(u: FeFunction) -> float:
    """Dirichlet energy ``1/2 |grad u|^2``."""
    k = _operators(u.mesh).stiffness
    return 0.5 * float(np.einsum("ij,ij->", u.values, k @ u.values))


def infsup_diagnostic(state: SaddleState) -> float:
    """Smallest generalized singular value of the constraint block.

    Computes ``min_mu sup_v b(mu, v) / (|grad v| |mu|_{H^-1_h})`` densely, with
    ``b(mu, v) = 1/2 (mu, Dg(u) . v)_h``. The dual norm uses the lumped pairing,
    ``|mu|_{H^-1_h} = sup_w (mu, w)_h / |grad w|``, matching the form of ``b``.
    """
    ops = _operators(state.mesh)
    nf = len(ops.free)
    if nf > INFSUP_MAX_FREE:
        raise ValueError(f"{nf} free nodes exceed the dense limit of {INFSUP_MAX_FREE}")
    m = state.u.m
    b = _b_block(state, ops).toarray()
    k = ops.k_ff.toarray()
    kv = np.kron(k, np.eye(m))
    beta = ops.beta_f
    s = b @ sla.solve(kv, b.T, assume_a="pos")
    t = beta[:, None] * sla.solve(k, np.diag(beta), assume_a="pos")
    s = 0.5 * (s + s.T)
    t = 0.5 * (t + t.T)
    eig = sla.eigh(s, t, eigvals_only=True, subset_by_index=[0, 0])
    return float(np.sqrt(max(eig[0], 0.0)))
