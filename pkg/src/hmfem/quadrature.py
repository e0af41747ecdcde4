"""Gauss-Jacobi collapsed-coordinate quadrature on the unit simplex."""
from __future__ import annotations

from functools import lru_cache
from math import ceil

import numpy as np
from scipy.special import roots_jacobi


@lru_cache(maxsize=None)
def simplex_rule(d: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature rule exact for polynomials of total ``degree`` on a simplex.

    Returns barycentric points of shape (q, d+1) and weights of shape (q,)
    summing to one, so that the integral over a simplex T is
    ``|T| * sum(w * f(points))``.
    """
    n = max(1, ceil((degree + 1) / 2))
    # conical product rule: direction k carries the Jacobi weight (1-t)^(d-1-k)
    nodes, weights = [], []
    for k in range(d):
        t, w = roots_jacobi(n, d - 1 - k, 0)
        nodes.append(0.5 * (t + 1.0))
        weights.append(w / 2.0 ** (d - k))
    grids = np.meshgrid(*nodes, indexing="ij")
    wgrid = np.prod(np.meshgrid(*weights, indexing="ij"), axis=0).ravel()
    ts = [g.ravel() for g in grids]

    # collapsed coordinates -> cartesian coordinates of the reference simplex
    q = len(wgrid)
    x = np.zeros((q, d))
    scale = np.ones(q)
    for k in range(d):
        x[:, k] = scale * ts[k]
        scale = scale * (1.0 - ts[k])
    bary = np.column_stack([1.0 - x.sum(axis=1), x])
    w = wgrid * np.prod(range(1, d + 1))  # reference volume 1/d!
    bary.setflags(write=False)
    w.setflags(write=False)
    return bary, w
