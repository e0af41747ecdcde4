"""Numerical experiments: exact solutions, perturbed starts, studies and export.

Two benchmark problems are provided. ``inv_stereo`` maps the square into the
unit sphere of R^3 by inverse stereographic projection; ``radial`` maps the
cube into the unit sphere via ``x -> (x - s)/|x - s|`` with ``s = 0.9 e_3``.
``ellipsoid_custom`` replaces the target of ``inv_stereo`` by the ellipsoid
with semi-axes (1, 1, 2) and has no closed-form solution.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import platform
import time
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import __version__
from .analysis import ErrorRecord, error_X, fill_eocs, records_to_csv
from .fem import FeFunction, assemble_stiffness, lumped_weights, nodal_interpolate
from .manifolds import TargetManifold, ellipsoid, sphere
from .mesh import PerturbSpec, SimplicialMesh, base_mesh, mesh_size, refined_mesh
from .solver import (
    LinearSolveFailure,
    NewtonTrace,
    SaddleState,
    energy,
    make_state,
    newton_solve,
)

__all__ = [
    "RHO_RULES",
    "EXAMPLES",
    "Example",
    "ExperimentSpec",
    "LevelResult",
    "ConvergenceReport",
    "BasinTable",
    "exact_solution",
    "noise_field",
    "noise_amplitude",
    "build_mesh",
    "interpolant_start",
    "perturbed_start",
    "solve_level",
    "constraint_residual",
    "run_convergence_study",
    "run_basin_study",
    "export_vtu",
    "read_vtu",
]

log = logging.getLogger(__name__)

# rule name -> exponent of h in the noise amplitude; "0" means no noise
RHO_RULES = {"0": None, "h": 1.0, "h34": 0.75, "h12": 0.5, "h14": 0.25, "1": 0.0}
SENTINEL = "---"
LEVEL_CAP_3D = 5
DEFAULT_LEVELS = {2: (1, 2, 3, 4, 5, 6, 7), 3: (1, 2, 3, 4, 5)}
ELLIPSOID_AXES = (1.0, 1.0, 2.0)
RADIAL_CENTER = np.array([0.0, 0.0, 0.9])


def _inv_stereo_u(x):
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    return np.stack([2 * x[..., 0], 2 * x[..., 1], 1 - r2], axis=-1) / (1 + r2)[..., None]


def _inv_stereo_lambda(x):
    r2 = np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)
    return -8.0 / (1 + r2) ** 2


def _radial_u(x):
    y = np.asarray(x, dtype=float) - RADIAL_CENTER
    return y / np.linalg.norm(y, axis=-1, keepdims=True)


def _radial_lambda(x):
    y = np.asarray(x, dtype=float) - RADIAL_CENTER
    return -2.0 / np.sum(y * y, axis=-1)


def _radial_projection(manifold: TargetManifold, s: np.ndarray) -> np.ndarray:
    # scale each point along its ray onto the level set of a quadratic g
    q = manifold.value(s) + 1.0
    return s / np.sqrt(q)[..., None]


def _ellipsoid_boundary(x):
    return _radial_projection(ellipsoid(ELLIPSOID_AXES), _inv_stereo_u(x))


@dataclass(frozen=True)
class Example:
    name: str
    d: int
    m: int
    manifold: TargetManifold
    boundary: Callable
    exact_u: Callable | None = None
    exact_lambda: Callable | None = None


EXAMPLES = {
    "inv_stereo": Example("inv_stereo", 2, 3, sphere(3), _inv_stereo_u, _inv_stereo_u, _inv_stereo_lambda),
    "radial": Example("radial", 3, 3, sphere(3), _radial_u, _radial_u, _radial_lambda),
    "ellipsoid_custom": Example("ellipsoid_custom", 2, 3, ellipsoid(ELLIPSOID_AXES), _ellipsoid_boundary),
}


def get_example(name: str) -> Example:
    try:
        return EXAMPLES[name]
    except KeyError:
        raise ValueError(f"unknown example {name!r}; expected one of {sorted(EXAMPLES)}") from None


def exact_solution(example: str):
    """Closed-form pair ``(u, lambda)`` with ``lambda = -|grad u|^2``."""
    ex = get_example(example)
    if ex.exact_u is None:
        raise ValueError(f"example {example!r} has no closed-form solution")
    return ex.exact_u, ex.exact_lambda


def noise_field(f: float, rho: float, d: int) -> Callable:
    """``x -> rho * sin(2 pi f x_1) ... sin(2 pi f x_d)``."""
    if not f > 0:
        raise ValueError("frequency must be positive")
    if rho < 0:
        raise ValueError("amplitude must be nonnegative")

    def field_(x):
        x = np.asarray(x, dtype=float)
        return rho * np.prod(np.sin(2 * np.pi * f * x[..., :d]), axis=-1)

    return field_


def noise_amplitude(rule: str, h: float) -> float:
    """Noise strength for a rule name in ``RHO_RULES`` on a mesh of size h."""
    if rule not in RHO_RULES:
        raise ValueError(f"unknown rho rule {rule!r}; expected one of {list(RHO_RULES)}")
    exponent = RHO_RULES[rule]
    return 0.0 if exponent is None else float(h**exponent)


@dataclass(frozen=True)
class ExperimentSpec:
    """Definition of a convergence or basin study.

    ``levels`` lists the refinement levels to run and defaults to 1-7 in 2D
    and 1-5 in 3D. ``mesh_mode`` is ``"uniform"`` or ``"perturbed"``;
    perturbed meshes use ``mesh_seed`` and ``mesh_rho``. ``rho_rules`` are the noise strengths probed by a basin
    study; a convergence study always starts from the interpolants.
    """

    example: str = "inv_stereo"
    levels: tuple | None = None
    mesh_mode: str = "uniform"
    mesh_seed: int = 0
    mesh_rho: float = 0.2
    noise_frequency: float = 10.0
    rho_rules: tuple = tuple(RHO_RULES)
    eps_stop: float = 1e-10
    max_iter: int = 25
    linear_solver: str = "auto"
    allow_large_3d: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        ex = get_example(self.example)
        if self.levels is None:
            object.__setattr__(self, "levels", DEFAULT_LEVELS[ex.d])
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        object.__setattr__(self, "rho_rules", tuple(str(r) for r in self.rho_rules))
        if not self.levels:
            raise ValueError("level range is empty")
        if min(self.levels) < 0:
            raise ValueError("levels must be nonnegative")
        if ex.d == 3 and max(self.levels) > LEVEL_CAP_3D and not self.allow_large_3d:
            raise ValueError(f"3D levels above {LEVEL_CAP_3D} need allow_large_3d")
        bad = [r for r in self.rho_rules if r not in RHO_RULES]
        if bad or not self.rho_rules:
            raise ValueError(f"rho rules must be drawn from {list(RHO_RULES)}, got {list(self.rho_rules)}")
        if not self.eps_stop > 0:
            raise ValueError("eps_stop must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.mesh_mode not in ("uniform", "perturbed"):
            raise ValueError(f"unknown mesh mode {self.mesh_mode!r}")
        if self.linear_solver not in ("auto", "direct", "krylov"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")
        if not self.noise_frequency > 0:
            raise ValueError("noise frequency must be positive")
        PerturbSpec(self.mesh_rho, self.mesh_seed)

    @property
    def d(self) -> int:
        return get_example(self.example).d

    @property
    def m(self) -> int:
        return get_example(self.example).m

    def to_dict(self) -> dict:
        out = asdict(self)
        out["levels"] = list(self.levels)
        out["rho_rules"] = list(self.rho_rules)
        out["manifold"] = get_example(self.example).manifold.describe()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"manifold"}
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, **kw) -> "ExperimentSpec":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def nominal_mesh_size(d: int, level: int) -> float:
    """Diameter of the unperturbed level-``level`` simplices."""
    return mesh_size(base_mesh(d)) * 0.5**level


def grid_spacing(level: int) -> float:
    """Edge length ``2^-level`` of the cube cells; the ``h`` of the noise rules."""
    return 0.5**level


def build_mesh(spec: ExperimentSpec, level: int) -> SimplicialMesh:
    perturbation = PerturbSpec(spec.mesh_rho, spec.mesh_seed) if spec.mesh_mode == "perturbed" else None
    return refined_mesh(spec.d, level, perturbation)


def interpolant_start(mesh: SimplicialMesh, example: str) -> SaddleState:
    """Start value built from nodal interpolants.

    For examples with an exact solution this is ``(I_h u, I_{h,D} lambda)``.
    Otherwise u is the boundary data interpolant projected radially onto the
    target, and lambda is the nodewise least-squares fit of the first
    optimality condition.
    """
    ex = get_example(example)
    if ex.exact_u is not None:
        u = nodal_interpolate(ex.exact_u, mesh, ex.m)
        lam = nodal_interpolate(ex.exact_lambda, mesh, 1)
        return make_state(u, lam, ex.manifold)
    values = _radial_projection(ex.manifold, nodal_interpolate(ex.boundary, mesh, ex.m).values)
    u = FeFunction(mesh, values)
    ku = assemble_stiffness(mesh) @ values
    dg = ex.manifold.gradient(values)
    lam = -2.0 * np.einsum("zi,zi->z", ku, dg) / (lumped_weights(mesh) * np.einsum("zi,zi->z", dg, dg))
    return make_state(u, lam, ex.manifold)


def perturbed_start(mesh: SimplicialMesh, example: str, f: float, rho: float) -> SaddleState:
    """Interpolant start plus the noise field at free nodes (u: every component)."""
    start = interpolant_start(mesh, example)
    if rho == 0:
        return start
    noise = noise_field(f, rho, mesh.dim)(mesh.vertices)
    noise[mesh.boundary_vertex] = 0.0
    u = start.u.values + noise[:, None]
    lam = start.lam.values[:, 0] + noise
    return make_state(FeFunction(mesh, u), lam, start.manifold)


@dataclass
class LevelResult:
    level: int
    n_vertices: int
    status: str
    trace: dict
    record: ErrorRecord | None = None
    energy: float | None = None
    constraint_residual: float | None = None
    message: str | None = None
    state: SaddleState | None = field(default=None, repr=False, compare=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def constraint_residual(state: SaddleState) -> float:
    """``max |g(u_h(z))|`` over the free vertices."""
    values = state.u.values[state.mesh.free_vertices]
    return float(np.abs(state.manifold.value(values)).max(initial=0.0))


def solve_level(spec: ExperimentSpec, level: int, rule: str = "0", mesh: SimplicialMesh | None = None):
    """Build the mesh and start for one level and run Newton's method.

    Returns ``(state, trace)``; ``state`` is None if a linear solve failed, in
    which case ``trace.status == "linear_solve_failed"``.
    """
    mesh = mesh or build_mesh(spec, level)
    rho = noise_amplitude(rule, grid_spacing(level))
    start = perturbed_start(mesh, spec.example, spec.noise_frequency, rho)
    try:
        return newton_solve(start, spec.eps_stop, spec.max_iter, spec.linear_solver)
    except LinearSolveFailure as exc:
        log.warning("level %d rule %s: %s", level, rule, exc)
        trace = NewtonTrace(status="linear_solve_failed", failed_at=exc.iteration)
        return None, trace


@dataclass
class ConvergenceReport:
    spec: ExperimentSpec
    levels: list[LevelResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def records(self) -> list[ErrorRecord]:
        return [r.record for r in self.levels if r.record is not None]

    @property
    def failed_levels(self) -> list[int]:
        return [r.level for r in self.levels if not r.converged]

    @property
    def seeds(self) -> dict:
        if self.spec.mesh_mode != "perturbed":
            return {}
        return {"mesh_seed": self.spec.mesh_seed, "per_level_streams": [[self.spec.mesh_seed, k] for k in range(1, max(self.spec.levels) + 1)]}

    def to_csv(self) -> str:
        return records_to_csv(self.records)

    def to_dict(self) -> dict:
        return {
            "kind": "convergence",
            "spec": self.spec.to_dict(),
            "levels": [
                {
                    "level": r.level,
                    "n_vertices": r.n_vertices,
                    "status": r.status,
                    "energy": r.energy,
                    "constraint_residual": r.constraint_residual,
                    "newton": r.trace,
                    "errors": None if r.record is None else r.record.as_dict(),
                    "message": r.message,
                }
                for r in self.levels
            ],
            "failed_levels": self.failed_levels,
            "seeds": self.seeds,
            "seconds": self.seconds,
            "versions": _versions(),
        }

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "convergence.csv", "json": out / "convergence.json"}
        paths["csv"].write_text(self.to_csv())
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n")
        return paths


def run_convergence_study(spec: ExperimentSpec, keep_states: bool = False) -> ConvergenceReport:
    """Solve from interpolant starts on every level and measure the errors.

    Failed levels are kept in the report without an error record; rates are
    computed over the remaining levels in order. Examples without a closed
    form solution get energies and constraint residuals only. With
    ``keep_states`` each level result holds its discrete solution.
    """
    ex = get_example(spec.example)
    report = ConvergenceReport(spec)
    start = time.perf_counter()
    for level in sorted(spec.levels):
        mesh = build_mesh(spec, level)
        state, trace = solve_level(spec, level, "0", mesh)
        result = LevelResult(level, mesh.n_vertices, trace.status, trace.summary())
        if trace.converged:
            if ex.exact_u is not None:
                result.record = error_X(state, ex.exact_u, ex.exact_lambda, h=nominal_mesh_size(spec.d, level))
            result.energy = energy(state.u)
            result.constraint_residual = constraint_residual(state)
            if keep_states:
                result.state = state
        else:
            result.message = f"Newton's method ended with status {trace.status}"
        log.info("level %d: %s", level, trace.summary())
        report.levels.append(result)
    fill_eocs(report.records)
    report.seconds = time.perf_counter() - start
    return report


@dataclass
class BasinTable:
    """Iteration counts per level and noise rule; None marks non-convergence."""

    spec: ExperimentSpec
    levels: list[int]
    rules: list[str]
    counts: list[list[int | None]]
    statuses: list[list[str]]
    seconds: float = 0.0

    def count(self, level: int, rule: str) -> int | None:
        return self.counts[self.levels.index(level)][self.rules.index(rule)]

    @property
    def any_failed(self) -> bool:
        return any(c is None for row in self.counts for c in row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level"] + [f"rho_{r}" for r in self.rules])
        for level, row in zip(self.levels, self.counts):
            w.writerow([level] + [SENTINEL if c is None else c for c in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "kind": "basin",
            "spec": self.spec.to_dict(),
            "levels": self.levels,
            "rules": self.rules,
            "counts": self.counts,
            "statuses": self.statuses,
            "seconds": self.seconds,
            "versions": _versions(),
        }

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "basin.csv", "json": out / "basin.json"}
        paths["csv"].write_text(self.to_csv())
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n")
        return paths


def run_basin_study(spec: ExperimentSpec) -> BasinTable:
    """Newton iteration counts from noisy starts, one cell per level and rule."""
    start = time.perf_counter()
    levels = sorted(spec.levels)
    counts, statuses = [], []
    for level in levels:
        mesh = build_mesh(spec, level)
        row, srow = [], []
        for rule in spec.rho_rules:
            _, trace = solve_level(spec, level, rule, mesh)
            row.append(trace.iterations if trace.converged else None)
            srow.append(trace.status)
            log.info("level %d rule %s: %s", level, rule, trace.status)
        counts.append(row)
        statuses.append(srow)
    return BasinTable(spec, levels, list(spec.rho_rules), counts, statuses, time.perf_counter() - start)


_VTK_CELL = {2: 5, 3: 10}  # triangle, tetrahedron


def _data_array(parent, name, values, components=1, dtype="Float64"):
    el = ET.SubElement(parent, "DataArray", type=dtype, Name=name, format="ascii")
    if components > 1:
        el.set("NumberOfComponents", str(components))
    flat = np.asarray(values).ravel()
    el.text = " ".join(repr(float(v)) if dtype.startswith("Float") else str(int(v)) for v in flat)
    return el


def export_vtu(state: SaddleState, path) -> Path:
    """Write the mesh with u as a vector and lambda as a scalar point field.

    The file is an ASCII VTK XML unstructured grid. Two-dimensional points are
    padded with a zero third coordinate.
    """
    mesh = state.mesh
    pts = np.zeros((mesh.n_vertices, 3))
    pts[:, : mesh.dim] = mesh.vertices
    root = ET.Element("VTKFile", type="UnstructuredGrid", version="0.1", byte_order="LittleEndian")
    grid = ET.SubElement(root, "UnstructuredGrid")
    piece = ET.SubElement(grid, "Piece", NumberOfPoints=str(mesh.n_vertices), NumberOfCells=str(mesh.n_simplices))
    _data_array(ET.SubElement(piece, "Points"), "Points", pts, 3)
    cells = ET.SubElement(piece, "Cells")
    k = mesh.dim + 1
    _data_array(cells, "connectivity", mesh.simplices, dtype="Int64")
    _data_array(cells, "offsets", k * np.arange(1, mesh.n_simplices + 1), dtype="Int64")
    _data_array(cells, "types", np.full(mesh.n_simplices, _VTK_CELL[mesh.dim]), dtype="UInt8")
    point_data = ET.SubElement(piece, "PointData", Vectors="u", Scalars="lambda")
    _data_array(point_data, "u", state.u.values, state.u.m)
    _data_array(point_data, "lambda", state.lam.values[:, 0])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)
    return path


def read_vtu(path) -> dict:
    """Parse a file written by :func:`export_vtu` into numpy arrays."""
    piece = ET.parse(path).getroot().find("UnstructuredGrid/Piece")
    out = {
        "n_points": int(piece.get("NumberOfPoints")),
        "n_cells": int(piece.get("NumberOfCells")),
    }
    for el in piece.iter("DataArray"):
        dtype = float if el.get("type").startswith("Float") else int
        values = np.array((el.text or "").split(), dtype=dtype)
        comps = int(el.get("NumberOfComponents", "1"))
        out[el.get("Name")] = values.reshape(-1, comps) if comps > 1 else values
    return out


def _versions() -> dict:
    return {
        "hmfem": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
