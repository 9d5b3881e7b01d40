"""Collapsed-coordinate (conical product) quadrature on reference simplices.

The reference d-simplex has vertices 0, e_1, ..., e_d.  Rules are built
from Gauss-Jacobi points so any exactness degree is available.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # (nq, d) reference coordinates
    weights: np.ndarray  # (nq,), sum = 1/d!
    degree: int

    @property
    def dim(self):
        return self.points.shape[1]


def _gauss_jacobi01(n, a):
    # nodes/weights on [0, 1] for weight (1 - s)^a
    x, w = roots_jacobi(n, a, 0)
    return (1.0 + x) / 2.0, w / 2.0 ** (a + 1)


@lru_cache(maxsize=None)
def simplex_rule(dim: int, degree: int) -> QuadratureRule:
    """Rule on the reference ``dim``-simplex exact for polynomials of ``degree``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    n = max(1, (degree + 2) // 2)
    # s_k with weight (1-s_k)^(dim-1-k)
    factors = [_gauss_jacobi01(n, dim - 1 - k) for k in range(dim)]
    grids = np.meshgrid(*[f[0] for f in factors], indexing="ij")
    wgrid = np.meshgrid(*[f[1] for f in factors], indexing="ij")
    s = [g.ravel() for g in grids]
    w = np.prod([g.ravel() for g in wgrid], axis=0)
    pts = np.zeros((len(w), dim))
    scale = np.ones(len(w))
    for k in range(dim):
        pts[:, k] = s[k] * scale
        scale = scale * (1.0 - s[k])
    pts.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(pts, w, degree)


def reference_measure(dim: int) -> float:
    return 1.0 / factorial(dim)
