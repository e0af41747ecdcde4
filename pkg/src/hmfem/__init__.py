"""Finite element approximation of harmonic maps into spheres and ellipsoids.

The discrete problem is the saddle-point system for a P1 map ``u_h`` and a
nodal Lagrange multiplier ``lambda_h`` enforcing the constraint ``g(u_h) = 0``
at every interior vertex. It is solved with Newton's method.
"""

__version__ = "0.1.0"
