"""Reference solutions and convergence measurement."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .forms import BETA, effective_beta, flow_operator
from .mesh import BoundarySpec, FlowBC, MechanicalBC, box_regions, classify_facets, mesh_size, unit_cube, unit_square
from .quadrature import simplex_rule
from .solver import solve_sparse
from .spaces import build_space, eval_at_reference, geometry


class VerificationError(ValueError):
    pass


# -- one-dimensional consolidation -----------------------------------------------------------

def consolidation_coefficient(K, nu, k, mu):
    """c_v = 3K(1 - nu)/(1 + nu) * k/mu for a drained column with alpha = 1."""
    if K <= 0 or k <= 0 or mu <= 0:
        raise VerificationError("K, k and mu must be positive")
    if not 0 <= nu < 0.5:
        raise VerificationError("Poisson ratio must lie in [0, 0.5)")
    return 3.0 * K * (1.0 - nu) / (1.0 + nu) * k / mu


def terzaghi_pressure(z_star, t_star, n_terms=200):
    """Normalized pore pressure p/sigma of the classical series.

    ``z_star`` is the depth below the drained face over the column height,
    ``t_star = c_v t / H^2``.  At ``t_star = 0`` the initial value 1 is
    returned inside the column.
    """
    z = np.asarray(z_star, dtype=float)
    t = np.asarray(t_star, dtype=float)
    if np.any(t < 0):
        raise VerificationError("t* must be non-negative")
    if np.any((z < 0) | (z > 1)):
        raise VerificationError("z* must lie in [0, 1]")
    if n_terms < 1:
        raise VerificationError("need at least one series term")
    M = np.pi * (2 * np.arange(n_terms) + 1) / 2.0
    zz, tt = np.broadcast_arrays(z, t)
    terms = 2.0 / M * np.sin(M * zz[..., None]) * np.exp(-M**2 * tt[..., None])
    out = terms.sum(axis=-1)
    return np.where(tt == 0, np.where(zz > 0, 1.0, 0.0), out)


@dataclass(frozen=True)
class TerzaghiParams:
    """Drained-top column under a compressive top load (SI units)."""
    sigma: float = 1e3
    K: float = 1e6
    nu: float = 0.25
    k: float = 1e-12
    mu: float = 1e-3
    H: float = 1.0
    top: float = 1.0

    @property
    def c_v(self):
        return consolidation_coefficient(self.K, self.nu, self.k, self.mu)

    def pressure(self, y, t, n_terms=200):
        z = (self.top - np.asarray(y, dtype=float)) / self.H
        return self.sigma * terzaghi_pressure(np.clip(z, 0.0, 1.0), self.c_v * t / self.H**2, n_terms)


# -- manufactured Poisson problem ------------------------------------------------------------

def poisson_manufactured(dim):
    """Exact solution, source and Dirichlet datum of -lap p = g."""
    if dim not in (2, 3):
        raise VerificationError("dim must be 2 or 3")

    def exact(x, t=0.0):
        return -np.cos(np.asarray(x, dtype=float).sum(axis=-1))

    def source(x, t=0.0):
        return -dim * np.cos(np.asarray(x, dtype=float).sum(axis=-1))

    return exact, source, exact


def solve_poisson(mesh, kind, degree, beta=None, penalty="trace"):
    """Weak-Dirichlet interior-penalty solve of the manufactured problem."""
    kind = kind.upper()
    space = build_space(mesh, kind, degree)
    beta = effective_beta(BETA[kind] if beta is None else beta, space, penalty)
    exact, source, bd = poisson_manufactured(mesh.dim)
    regions = box_regions(mesh.box_extents, mesh.dim)
    bcs = BoundarySpec(mechanical={r: MechanicalBC("displacement") for r in regions},
                       flow={r: FlowBC("pressure", bd) for r in regions})
    cls = classify_facets(mesh, bcs)
    op = flow_operator(space, np.ones(mesh.n_cells), beta, cls, bcs, source=source)
    # same null mode as in the coupled system: pin one cell constant
    gauge = np.array([space.n_cg]) if kind == "EG" else np.zeros(0, dtype=np.int64)
    p = solve_sparse(op.K, op.f, gauge, np.zeros(len(gauge)))
    return space, p


def l2_error(space, dofs, exact, degree=None):
    """||p_h - p||_L2 with a rule of degree 2k + 2 by default."""
    degree = 2 * space.degree + 2 if degree is None else degree
    rule = simplex_rule(space.mesh.dim, degree)
    geo = geometry(space.mesh)
    val, _ = eval_at_reference(space, dofs, rule.points)
    x = geo.to_physical(rule.points)
    diff = val - exact(x)
    return float(np.sqrt(np.sum(np.abs(geo.det)[:, None] * rule.weights * diff**2)))


def convergence_rate(errors, sizes):
    """Least-squares slope of log(error) against log(h)."""
    errors = np.asarray(errors, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    if errors.shape != sizes.shape or errors.size < 2:
        raise VerificationError("need at least two (h, error) pairs")
    if np.any(errors <= 0) or np.any(sizes <= 0):
        raise VerificationError("errors and sizes must be positive")
    return float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])


@dataclass
class ConvergenceRow:
    h: float
    n_dofs: int
    l2_error: float
    rate: float


def convergence_study(dim, kind, degree, levels: Sequence[int], beta=None, penalty="trace"):
    """Errors on unit square/cube meshes with ``n`` divisions per side."""
    rows = []
    for i, n in enumerate(levels):
        mesh = unit_square(n) if dim == 2 else unit_cube(n)
        space, p = solve_poisson(mesh, kind, degree, beta, penalty)
        err = l2_error(space, p, poisson_manufactured(dim)[0])
        h = mesh_size(mesh)
        rate = np.nan if i == 0 else np.log(rows[-1].l2_error / err) / np.log(rows[-1].h / h)
        rows.append(ConvergenceRow(h, space.n_dofs, err, float(rate)))
    return rows


def write_convergence_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["h", "n_dofs", "l2_error", "rate"])
        for r in rows:
            w.writerow([format(r.h, ".17g"), r.n_dofs, format(r.l2_error, ".17g"), format(r.rate, ".17g")])
