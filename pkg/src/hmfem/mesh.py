"""Structured simplicial meshes of the cube (-1/2, 1/2)^d and red refinement.

Meshes are immutable value objects. Refinement is a pure function returning a
new mesh; the optional random perturbation of new interior edge midpoints is
seeded and bit-reproducible.

Examples
--------
>>> from hmfem.mesh import base_mesh, refine_uniform
>>> m = base_mesh(2)
>>> for _ in range(3):
...     m = refine_uniform(m)
>>> m.n_vertices
81
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from math import factorial
from pathlib import Path

import numpy as np

__all__ = [
    "MeshError",
    "PerturbSpec",
    "SimplicialMesh",
    "base_mesh",
    "refine_uniform",
    "refined_mesh",
    "mesh_size",
    "simplex_quality",
    "check_conforming",
    "write_mesh",
    "read_mesh",
]

HALF = 0.5
MAX_PERTURB_RETRIES = 5
QUALITY_FLOOR = 0.5
SIZE_CAP = 1.4


class MeshError(ValueError):
    """Invalid mesh input or a refinement that cannot be carried out."""


@dataclass(frozen=True)
class PerturbSpec:
    """Random displacement of new interior vertices during refinement.

    ``rho`` is relative to the length of the bisected edge.
    """

    rho: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho < 0.25:
            raise MeshError(f"perturbation magnitude must lie in [0, 0.25), got {self.rho}")


def _signed_volumes(vertices: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    x = vertices[simplices]
    edges = x[:, 1:, :] - x[:, :1, :]
    d = vertices.shape[1]
    return np.linalg.det(edges) / factorial(d)


def _normalize(vertices: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    # sort, then swap the last two indices where the orientation is negative
    s = np.sort(simplices, axis=1)
    vol = _signed_volumes(vertices, s)
    neg = vol < 0
    s[neg, -2], s[neg, -1] = s[neg, -1], s[neg, -2].copy()
    return s


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Conforming simplicial mesh of the cube (-1/2, 1/2)^d.

    Attributes
    ----------
    vertices : (nv, d) float array
    simplices : (ns, d+1) int array, positively oriented
    boundary_vertex : (nv,) bool array, True on the boundary of the cube
    level : int
        Number of refinements applied to the base mesh.
    """

    vertices: np.ndarray
    simplices: np.ndarray
    boundary_vertex: np.ndarray
    level: int = 0
    seeds: tuple = field(default=())

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        s = np.ascontiguousarray(self.simplices, dtype=np.int64)
        b = np.ascontiguousarray(self.boundary_vertex, dtype=bool)
        if v.ndim != 2 or v.shape[1] not in (2, 3):
            raise MeshError(f"unsupported vertex array of shape {v.shape}")
        if s.ndim != 2 or s.shape[1] != v.shape[1] + 1:
            raise MeshError("simplices must have d+1 vertices")
        if b.shape != (v.shape[0],):
            raise MeshError("boundary flag must have one entry per vertex")
        s = _normalize(v, s)
        for arr in (v, s, b):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "simplices", s)
        object.__setattr__(self, "boundary_vertex", b)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_simplices(self) -> int:
        return self.simplices.shape[0]

    @cached_property
    def volumes(self) -> np.ndarray:
        return _signed_volumes(self.vertices, self.simplices)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs, lexicographically ordered."""
        return self._edge_data[0]

    @cached_property
    def _edge_data(self):
        d = self.dim
        pairs = [(i, j) for i in range(d + 1) for j in range(i + 1, d + 1)]
        local = np.array(pairs)
        all_edges = self.simplices[:, local]  # (ns, n_local, 2)
        all_edges = np.sort(all_edges, axis=2).reshape(-1, 2)
        edges, inverse = np.unique(all_edges, axis=0, return_inverse=True)
        return edges, inverse.reshape(self.n_simplices, len(pairs)), pairs

    @property
    def free_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_vertex)

    @property
    def h_max(self) -> float:
        return mesh_size(self)


def mesh_size(mesh: SimplicialMesh) -> float:
    """Maximal simplex diameter (the longest edge)."""
    e = mesh.edges
    return float(np.max(np.linalg.norm(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]], axis=1)))


def base_mesh(d: int) -> SimplicialMesh:
    """Coarsest triangulation of the cube.

    Two right triangles split along the main diagonal for ``d=2``; the Kuhn
    decomposition into six tetrahedra sharing the main diagonal for ``d=3``.
    """
    if d == 2:
        vertices = np.array([[-HALF, -HALF], [HALF, -HALF], [HALF, HALF], [-HALF, HALF]])
        simplices = np.array([[0, 1, 2], [0, 2, 3]])
    elif d == 3:
        corners = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=float)
        vertices = corners - HALF
        index = {tuple(c.astype(int)): n for n, c in enumerate(corners)}
        simplices = []
        for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
            p = np.zeros(3, dtype=int)
            tet = [index[tuple(p)]]
            for axis in perm:
                p[axis] = 1
                tet.append(index[tuple(p)])
            simplices.append(tet)
        simplices = np.array(simplices)
    else:
        raise MeshError(f"unsupported dimension d={d}; expected 2 or 3")
    boundary = np.ones(len(vertices), dtype=bool)
    return SimplicialMesh(vertices, simplices, boundary, level=0)


def _children_2d(s: np.ndarray, mid) -> np.ndarray:
    a, b, c = s[:, 0], s[:, 1], s[:, 2]
    ab, ac, bc = mid(0, 1), mid(0, 2), mid(1, 2)
    return np.concatenate([
        np.stack([a, ab, ac], axis=1),
        np.stack([ab, b, bc], axis=1),
        np.stack([ac, bc, c], axis=1),
        np.stack([ab, bc, ac], axis=1),
    ])


def _children_3d(s: np.ndarray, mid, vertices: np.ndarray) -> np.ndarray:
    x = [s[:, i] for i in range(4)]
    m = {(i, j): mid(i, j) for i in range(4) for j in range(i + 1, 4)}
    corners = [
        np.stack([x[0], m[0, 1], m[0, 2], m[0, 3]], axis=1),
        np.stack([m[0, 1], x[1], m[1, 2], m[1, 3]], axis=1),
        np.stack([m[0, 2], m[1, 2], x[2], m[2, 3]], axis=1),
        np.stack([m[0, 3], m[1, 3], m[2, 3], x[3]], axis=1),
    ]
    # inner octahedron: opposite vertex pairs are its three diagonals
    diagonals = [(m[0, 1], m[2, 3]), (m[0, 2], m[1, 3]), (m[0, 3], m[1, 2])]
    lengths = np.stack(
        [np.linalg.norm(vertices[p] - vertices[q], axis=1) for p, q in diagonals], axis=1
    )
    lowest = np.stack([np.minimum(p, q) for p, q in diagonals], axis=1)
    # shortest diagonal; near-ties resolved by the lowest vertex index
    tol = 1e-12 * lengths.max(axis=1, keepdims=True)
    shortest = lengths <= lengths.min(axis=1, keepdims=True) + tol
    key = np.where(shortest, lowest, np.iinfo(np.int64).max)
    choice = np.argmin(key, axis=1)

    inner = np.empty((len(s), 4, 4), dtype=np.int64)
    for k in range(3):
        sel = choice == k
        if not np.any(sel):
            continue
        p, q = diagonals[k]
        (a, a2), (b, b2) = [diagonals[j] for j in range(3) if j != k]
        ring = [a, b, a2, b2]
        for t in range(4):
            inner[sel, t] = np.stack(
                [p[sel], q[sel], ring[t][sel], ring[(t + 1) % 4][sel]], axis=1
            )
    return np.concatenate(corners + [inner[:, t] for t in range(4)])


def _midpoint_on_boundary(vertices: np.ndarray, boundary: np.ndarray, edges: np.ndarray) -> np.ndarray:
    xa, xb = vertices[edges[:, 0]], vertices[edges[:, 1]]
    same_face = (xa == xb) & (np.abs(xa) == HALF)
    return boundary[edges[:, 0]] & boundary[edges[:, 1]] & same_face.any(axis=1)


def _ball_samples(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.random(n) ** (1.0 / d)
    return direction * radius[:, None]


def simplex_quality(vertices: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Scale-invariant shape measure ``|T| / (mean squared edge length)^(d/2)``.

    Negative for inverted simplices, zero for degenerate ones.
    """
    d = vertices.shape[1]
    x = vertices[simplices]
    sq = [np.sum((x[:, i] - x[:, j]) ** 2, axis=1) for i in range(d + 1) for j in range(i + 1, d + 1)]
    mean_sq = np.mean(sq, axis=0)
    return _signed_volumes(vertices, simplices) / mean_sq ** (d / 2)


def _perturb(vertices, simplices, edges, on_boundary, nv, spec: PerturbSpec, level: int) -> np.ndarray:
    d = vertices.shape[1]
    rng = np.random.default_rng([spec.seed, level])
    moved = np.flatnonzero(~on_boundary)
    x = vertices
    radius = spec.rho * np.linalg.norm(x[edges[moved, 1]] - x[edges[moved, 0]], axis=1)
    shift = _ball_samples(rng, len(moved), d) * radius[:, None]

    # a child may not drop below the quality floor of the base mesh (or below
    # its quality with unperturbed midpoints if that is lower already), and its
    # longest edge may not exceed SIZE_CAP times the nominal mesh size
    before = simplex_quality(x, simplices)
    floor = QUALITY_FLOOR * _reference_quality(d)
    threshold = np.minimum(floor, before)
    size_cap = np.maximum(SIZE_CAP * _nominal_size(d, level), _longest_edges(x, simplices))
    slot = np.full(len(x), -1)
    slot[nv + moved] = np.arange(len(moved))

    def offenders(shift):
        trial = x.copy()
        trial[nv + moved] += shift
        bad = (simplex_quality(trial, simplices) < threshold) | (_longest_edges(trial, simplices) > size_cap)
        found = np.unique(slot[simplices[bad]])
        return trial, found[found >= 0]

    for _ in range(MAX_PERTURB_RETRIES):
        trial, bad = offenders(shift)
        if bad.size == 0:
            return trial
        radius[bad] *= 0.5
        shift[bad] = _ball_samples(rng, len(bad), d) * radius[bad, None]
    # leave the remaining offenders at their midpoints; resetting one vertex can
    # spoil a neighbour, so repeat until clean (all-zero shifts always are)
    trial, bad = offenders(shift)
    while bad.size:
        shift[bad] = 0.0
        trial, bad = offenders(shift)
    if np.any(_signed_volumes(trial, simplices) <= 0):
        raise MeshError("perturbed refinement produced degenerate simplices after 5 retries")
    return trial


def _longest_edges(vertices: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    x = vertices[simplices]
    d = simplices.shape[1] - 1
    sq = [np.sum((x[:, i] - x[:, j]) ** 2, axis=1) for i in range(d + 1) for j in range(i + 1, d + 1)]
    return np.sqrt(np.max(sq, axis=0))


def _nominal_size(d: int, level: int) -> float:
    return mesh_size(base_mesh(d)) * 0.5**level


def _reference_quality(d: int) -> float:
    base = base_mesh(d)
    return float(simplex_quality(base.vertices, base.simplices).min())


def refine_uniform(mesh: SimplicialMesh, perturbation: PerturbSpec | None = None) -> SimplicialMesh:
    """Red-refine every simplex via its edge midpoints.

    Parameters
    ----------
    mesh : SimplicialMesh
    perturbation : PerturbSpec, optional
        If given, each new interior vertex is moved by a uniformly distributed
        vector in the ball of radius ``rho * |edge|``. New boundary vertices are
        never moved. Vertices of children whose shape quality drops below
        ``QUALITY_FLOOR`` times that of the base mesh, or whose longest edge
        exceeds ``SIZE_CAP`` times the unperturbed mesh size, get a fresh draw
        with half the radius; after five such retries they stay at the midpoint.

    Returns
    -------
    SimplicialMesh
        The refined mesh with ``level`` incremented.
    """
    d = mesh.dim
    edges, simplex_edges, pairs = mesh._edge_data
    nv = mesh.n_vertices
    pair_index = {p: n for n, p in enumerate(pairs)}

    def mid(i, j):
        return nv + simplex_edges[:, pair_index[(i, j)]]

    x = mesh.vertices
    midpoints = 0.5 * (x[edges[:, 0]] + x[edges[:, 1]])
    on_boundary = _midpoint_on_boundary(x, mesh.boundary_vertex, edges)
    vertices = np.concatenate([x, midpoints])
    boundary = np.concatenate([mesh.boundary_vertex, on_boundary])

    if d == 2:
        simplices = _children_2d(mesh.simplices, mid)
    else:
        simplices = _children_3d(mesh.simplices, mid, vertices)
    # orientation of children does not depend on the tiny displacement only if
    # the displacement is valid; children are sorted/oriented before perturbing
    simplices = _normalize(vertices, simplices)

    seeds = mesh.seeds
    if perturbation is not None and perturbation.rho > 0:
        vertices = _perturb(vertices, simplices, edges, on_boundary, nv, perturbation, mesh.level + 1)
        seeds = seeds + (perturbation.seed,)

    return SimplicialMesh(vertices, simplices, boundary, level=mesh.level + 1, seeds=seeds)


def refined_mesh(d: int, level: int, perturbation: PerturbSpec | None = None) -> SimplicialMesh:
    """Base mesh refined ``level`` times (perturbed at every refinement if requested)."""
    if level < 0:
        raise MeshError("level must be nonnegative")
    mesh = base_mesh(d)
    for _ in range(level):
        mesh = refine_uniform(mesh, perturbation)
    return mesh


def check_conforming(mesh: SimplicialMesh, tol: float = 1e-12) -> None:
    """Raise MeshError unless the mesh is a conforming triangulation of the cube.

    Checks positive volumes, total volume 1, that every facet is shared by at
    most two simplices, and that unshared facets lie on the cube boundary.
    """
    if np.any(mesh.volumes <= 0):
        raise MeshError("mesh contains non-positive simplices")
    if abs(mesh.volumes.sum() - 1.0) > tol:
        raise MeshError(f"total volume {mesh.volumes.sum()!r} differs from 1")
    d = mesh.dim
    facets = np.concatenate([np.delete(mesh.simplices, k, axis=1) for k in range(d + 1)])
    facets = np.sort(facets, axis=1)
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("a facet is shared by more than two simplices")
    outer = uniq[counts == 1]
    xs = mesh.vertices[outer]  # (nf, d, d)
    on_plane = (np.abs(xs) == HALF).all(axis=1) & (xs == xs[:, :1, :]).all(axis=1)
    if not np.all(on_plane.any(axis=1)):
        raise MeshError("an unshared facet lies in the interior (hanging node)")
    flagged = mesh.vertices[mesh.boundary_vertex]
    if not np.all((np.abs(flagged) == HALF).any(axis=1)):
        raise MeshError("a boundary-flagged vertex is not on the cube boundary")


def write_mesh(mesh: SimplicialMesh, path) -> None:
    """Plain text: ``dim nv ns level``, vertex lines, simplex lines.

    Vertex lines carry the coordinates followed by the boundary flag (0/1).
    """
    lines = [f"{mesh.dim} {mesh.n_vertices} {mesh.n_simplices} {mesh.level}"]
    for x, b in zip(mesh.vertices, mesh.boundary_vertex):
        lines.append(" ".join(repr(float(c)) for c in x) + f" {int(b)}")
    for s in mesh.simplices:
        lines.append(" ".join(str(int(i)) for i in s))
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> SimplicialMesh:
    with open(path) as fh:
        dim, nv, ns, level = (int(t) for t in fh.readline().split())
        rows = [fh.readline().split() for _ in range(nv)]
        data = np.array(rows, dtype=float)
        simplices = np.array([fh.readline().split() for _ in range(ns)], dtype=np.int64)
    if data.shape != (nv, dim + 1) or simplices.shape != (ns, dim + 1):
        raise MeshError(f"malformed mesh file {path}")
    return SimplicialMesh(data[:, :dim], simplices, data[:, dim] > 0, level=level)
