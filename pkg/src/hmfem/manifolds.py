"""Target hypersurfaces ``{s : g(s) = 0}`` with gradient and Hessian of g.

All maps are vectorized over leading axes: ``value`` takes (..., m) and
returns (...), ``gradient`` returns (..., m), ``hessian`` returns (..., m, m).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["TargetManifold", "sphere", "ellipsoid", "custom", "closest_point_residual", "from_config"]


@dataclass(frozen=True, eq=False)
class TargetManifold:
    m: int
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    kind: str = "custom"
    semi_axes: tuple = field(default=())
    quadratic: bool = False

    def describe(self) -> dict:
        out = {"manifold": self.kind, "m": self.m}
        if self.kind == "ellipsoid":
            out["semi_axes"] = list(self.semi_axes)
        return out


def _quadratic(weights: np.ndarray, kind: str, semi_axes: tuple = ()) -> TargetManifold:
    m = len(weights)
    w = np.array(weights, dtype=float)
    diag = np.diag(2.0 * w)
    diag.setflags(write=False)

    def value(s):
        s = np.asarray(s, dtype=float)
        return np.einsum("...i,i->...", s * s, w) - 1.0

    def gradient(s):
        return 2.0 * np.asarray(s, dtype=float) * w

    def hessian(s):
        shape = np.shape(s)[:-1]
        return np.broadcast_to(diag, shape + (m, m))

    return TargetManifold(m, value, gradient, hessian, kind=kind, semi_axes=semi_axes, quadratic=True)


def sphere(m: int) -> TargetManifold:
    """Unit sphere in R^m, ``g(s) = |s|^2 - 1``."""
    if m < 2:
        raise ValueError(f"sphere needs m >= 2, got {m}")
    return _quadratic(np.ones(m), "sphere")


def ellipsoid(semi_axes) -> TargetManifold:
    """Ellipsoid ``sum_i s_i^2 / a_i^2 = 1``."""
    a = np.asarray(semi_axes, dtype=float)
    if a.ndim != 1 or len(a) < 2 or np.any(~(a > 0)):
        raise ValueError(f"semi-axes must be positive, got {semi_axes!r}")
    return _quadratic(1.0 / a**2, "ellipsoid", tuple(float(x) for x in a))


def custom(m: int, value, gradient, hessian) -> TargetManifold:
    """User-supplied level-set function; assumed non-quadratic."""
    return TargetManifold(m, value, gradient, hessian, kind="custom")


def closest_point_residual(manifold: TargetManifold, s) -> np.ndarray:
    """Constraint violation ``|g(s)|``."""
    return np.abs(manifold.value(np.asarray(s, dtype=float)))


def from_config(cfg: dict, m: int = 3) -> TargetManifold:
    name = cfg.get("manifold", "sphere")
    if name == "sphere":
        return sphere(m)
    if name == "ellipsoid":
        return ellipsoid(cfg["semi_axes"])
    raise ValueError(f"unknown manifold {name!r}")
