"""Assembly of the discrete momentum and mass-balance forms.

Momentum (vector CG displacement)::

    a(u, v) = sum_T (2 mu_l eps(u) : eps(v) + lambda_l div u div v)
    b(p, v) = -sum_T alpha p div v

Mass balance (CG, EG or DG pressure) with symmetric interior penalty on
interior and pressure-Dirichlet facets::

    d(p, q) = sum_T S p q + dt [ sum_T kappa grad p . grad q
              - sum_e {kappa grad p}_w . [[q]] - {kappa grad q}_w . [[p]]
              + beta / h_e kappa_e [[p]] . [[q]] ]
    c(u, q) = sum_T rho alpha div u q

The facet average is weighted by the normal-projected mobilities of the two
neighbours and the penalty uses their harmonic mean.  The same facet kernel
serves all three pressure spaces; EG differs from DG only in its local basis
(P_k plus the cell constant) and the shared CG part of the dof map.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from math import factorial
from typing import Dict

import numpy as np
import scipy.io
import scipy.sparse as sp

from .mesh import BoundarySpec, FacetClassification, characteristic_length
from .quadrature import simplex_rule
from .spaces import EgFnSpace, FnSpace, geometry

VOLUME_DEGREE = 4
BETA = {"EG": 0.9, "DG": 0.95, "CG": 0.9}


class AssemblyError(ValueError):
    pass


PENALTY_MODES = ("trace", "literal")


def trace_constant(degree, dim):
    """(k + 1)(k + d)/d, the P_k trace-inverse constant on a d-simplex."""
    return (degree + 1) * (degree + dim) / dim


def effective_beta(beta, p_space, mode="trace"):
    """Penalty coefficient multiplying kappa_e / h_e.

    ``trace`` scales the nominal beta by the trace-inverse constant of the
    pressure degree, which keeps the interior-penalty operator coercive for
    nominal values near one; ``literal`` uses beta as given.
    """
    if mode not in PENALTY_MODES:
        raise AssemblyError(f"unknown penalty mode {mode!r}")
    if beta <= 0:
        raise AssemblyError("penalty must be positive")
    if mode == "literal":
        return float(beta)
    return float(beta) * trace_constant(p_space.degree, p_space.mesh.dim)


def facet_degree(p_space) -> int:
    return max(3, 2 * p_space.degree)


def bc_value(value, x, t, shape=()):
    """Evaluate a boundary datum: a constant, a sequence, or f(x, t)."""
    if callable(value):
        out = np.asarray(value(x, t), dtype=float)
    else:
        out = np.asarray(value, dtype=float)
    return np.broadcast_to(out, x.shape[:-1] + shape).astype(float)


def _coo(local, rows, cols, shape):
    nr, nc = local.shape[1], local.shape[2]
    r = np.broadcast_to(rows[:, :, None], (len(rows), nr, nc))
    c = np.broadcast_to(cols[:, None, :], (len(cols), nr, nc))
    return sp.coo_matrix((local.ravel(), (r.ravel(), c.ravel())), shape=shape).tocsr()


def _scatter(local, rows, n):
    return np.bincount(rows.ravel(), weights=local.ravel(), minlength=n)


# -- facet operators ---------------------------------------------------------------

def facet_operators(x_plus, x_minus, n_plus, kappa_plus, kappa_minus):
    """Jump, weighted average, weight delta_e and harmonic mobility on a facet.

    Mobilities may be scalars or (d, d) tensors; tensors are projected onto
    the normal.  Returns ``(jump, average, delta, kappa_e)`` where the jump
    of a scalar is the vector ``x+ n+ + x- n-`` with ``n- = -n+``.
    """
    n_plus = np.asarray(n_plus, dtype=float)

    def project(k):
        k = np.asarray(k, dtype=float)
        if k.ndim >= 2 and k.shape[-2:] == (n_plus.shape[-1],) * 2:
            return np.einsum("...i,...ij,...j->...", n_plus, k, n_plus)
        return k

    kp, km = project(kappa_plus), project(kappa_minus)
    if np.any(kp <= 0) or np.any(km <= 0):
        raise AssemblyError("normal-projected mobility must be positive")
    delta = km / (kp + km)
    kappa_e = 2.0 * kp * km / (kp + km)
    xp, xm = np.asarray(x_plus, dtype=float), np.asarray(x_minus, dtype=float)
    jump = (xp - xm)[..., None] * n_plus
    average = delta * xp + (1.0 - delta) * xm
    return jump, average, delta, kappa_e


# -- cached basis data ---------------------------------------------------------------

@dataclass
class _VolumeData:
    weights: np.ndarray      # (nc, nq) physical weights
    phi: np.ndarray          # (nq, n) scalar basis values
    grad: np.ndarray         # (nc, nq, n, d)
    points: np.ndarray       # (nc, nq, d)


@dataclass
class _FacetData:
    facets: np.ndarray
    weights: np.ndarray      # (nf, nq)
    points: np.ndarray       # (nf, nq, d)
    normal: np.ndarray       # (nf, d) n+ (outward from the first cell)
    h_e: np.ndarray
    sides: list = field(default_factory=list)   # per side: (cells, phi (nf,nq,n), grad (nf,nq,n,d))


def _cache(space):
    c = getattr(space, "_forms_cache", None)
    if c is None:
        c = {}
        space._forms_cache = c
    return c


def volume_data(space: FnSpace, degree: int = VOLUME_DEGREE) -> _VolumeData:
    key = ("vol", degree)
    cache = _cache(space)
    if key not in cache:
        mesh = space.mesh
        geo = geometry(mesh)
        rule = simplex_rule(mesh.dim, degree)
        phi, dphi = space.basis(rule.points)
        grad = geo.physical_grads(dphi)
        w = np.abs(geo.det)[:, None] * rule.weights[None, :]
        cache[key] = _VolumeData(w, phi, grad, geo.to_physical(rule.points))
    return cache[key]


def facet_data(space: FnSpace, facets, degree: int, two_sided: bool) -> _FacetData:
    facets = np.asarray(facets, dtype=np.int64)
    key = ("facet", degree, two_sided, facets.tobytes())
    cache = _cache(space)
    if key in cache:
        return cache[key]
    mesh = space.mesh
    d = mesh.dim
    geo = geometry(mesh)
    rule = simplex_rule(d - 1, degree)
    verts = mesh.vertices[mesh.facets[facets]]                     # (nf, d, d)
    x = verts[:, None, 0, :] + np.einsum("fjd,qj->fqd", verts[:, 1:, :] - verts[:, :1, :], rule.points)
    w = mesh.facet_areas[facets][:, None] * rule.weights[None, :] * factorial(d - 1)
    data = _FacetData(facets, w, x, mesh.facet_normals[facets], characteristic_length(mesh, facets))
    for s in range(2 if two_sided else 1):
        cells = mesh.facet_cells[facets, s]
        ref = geo.to_reference(x, cells)
        phi, dphi = space.basis(ref)
        data.sides.append((cells, phi, geo.physical_grads(dphi, cells)))
    cache[key] = data
    return data


# -- momentum -----------------------------------------------------------------------------

@dataclass
class MomentumParts:
    J_uu: sp.csr_matrix
    J_up: sp.csr_matrix
    L_u: np.ndarray
    fixed_dofs: np.ndarray
    fixed_values: np.ndarray


def stiffness_matrix(u_space: FnSpace, materials, degree=VOLUME_DEGREE):
    vol = volume_data(u_space, degree)
    G = vol.grad
    wm = vol.weights * materials.mu_l[:, None]
    wl = vol.weights * materials.lam[:, None]
    d = u_space.mesh.dim
    lap = np.einsum("cq,cqad,cqbd->cab", wm, G, G)
    loc = lap[:, :, None, :, None] * np.eye(d)[None, None, :, None, :]
    loc = loc + np.einsum("cq,cqal,cqbk->cakbl", wm, G, G)
    loc = loc + np.einsum("cq,cqak,cqbl->cakbl", wl, G, G)
    na = G.shape[2]
    loc = loc.reshape(len(G), na * d, na * d)
    dofs = u_space.cell_dofs
    return _coo(loc, dofs, dofs, (u_space.n_dofs, u_space.n_dofs))


def coupling_matrix(u_space: FnSpace, p_space: FnSpace, weight, degree=VOLUME_DEGREE):
    """sum_T weight * q div v as an (N_p, N_u) matrix (rows: pressure test)."""
    vu = volume_data(u_space, degree)
    vp = volume_data(p_space, degree)
    w = vu.weights * np.asarray(weight)[:, None]
    loc = np.einsum("cq,qm,cqak->cmak", w, vp.phi, vu.grad)
    loc = loc.reshape(len(w), vp.phi.shape[1], -1)
    return _coo(loc, p_space.cell_dofs, u_space.cell_dofs, (p_space.n_dofs, u_space.n_dofs))


def mass_matrix(space: FnSpace, weight=None, degree=VOLUME_DEGREE):
    vol = volume_data(space, degree)
    w = vol.weights if weight is None else vol.weights * np.asarray(weight)[:, None]
    loc = np.einsum("cq,qa,qb->cab", w, vol.phi, vol.phi)
    vd = space.value_dim
    if vd > 1:
        na = loc.shape[1]
        loc = (loc[:, :, None, :, None] * np.eye(vd)[None, None, :, None, :]).reshape(len(w), na * vd, na * vd)
    return _coo(loc, space.cell_dofs, space.cell_dofs, (space.n_dofs, space.n_dofs))


def displacement_constraints(u_space: FnSpace, cls: FacetClassification, bcs: BoundarySpec, t=0.0):
    dofs, vals = [], []
    d = u_space.mesh.dim
    for label, bc in bcs.mechanical.items():
        if bc.kind != "displacement":
            continue
        facets = cls.labelled(label)
        if len(facets) == 0:
            continue
        nodes = u_space.facet_nodes(facets)
        v = bc_value(bc.value, u_space.node_coords[nodes], t, (d,))
        comps = range(d) if bc.components is None else bc.components
        for k in comps:
            dofs.append(nodes * d + k)
            vals.append(v[:, k])
    if not dofs:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    dofs = np.concatenate(dofs)
    vals = np.concatenate(vals)
    # later labels win on shared nodes
    uniq, idx = np.unique(dofs[::-1], return_index=True)
    return uniq, vals[::-1][idx]


def traction_vector(u_space: FnSpace, cls: FacetClassification, bcs: BoundarySpec, t=0.0):
    d = u_space.mesh.dim
    L = np.zeros(u_space.n_dofs)
    for label, bc in bcs.mechanical.items():
        if bc.kind != "traction":
            continue
        facets = cls.labelled(label)
        if len(facets) == 0:
            continue
        fd = facet_data(u_space, facets, VOLUME_DEGREE, two_sided=False)
        cells, phi, _ = fd.sides[0]
        tr = bc_value(bc.value, fd.points, t, (d,))                 # (nf, nq, d)
        loc = np.einsum("fq,fqa,fqk->fak", fd.weights, phi, tr).reshape(len(facets), -1)
        L += _scatter(loc, u_space.cell_dofs[cells], u_space.n_dofs)
    return L


def assemble_momentum(u_space, p_space, materials, cls: FacetClassification, bcs: BoundarySpec, t=0.0,
                      degree=VOLUME_DEGREE) -> MomentumParts:
    """J_uu = a(., .), J_up = b(., .), L_u = traction load; body force is zero."""
    for f in u_space.mesh.boundary_facets:
        if cls.labels[f] not in bcs.mechanical:
            raise AssemblyError(f"boundary facet {int(f)} has no mechanical condition")
    J_uu = stiffness_matrix(u_space, materials, degree)
    J_up = -coupling_matrix(u_space, p_space, materials.alpha, degree).T.tocsr()
    L_u = traction_vector(u_space, cls, bcs, t)
    fixed, vals = displacement_constraints(u_space, cls, bcs, t)
    return MomentumParts(J_uu, J_up, L_u, fixed, vals)


# -- mass balance -----------------------------------------------------------------------------

@dataclass
class FlowOperator:
    """kappa-dependent part: diffusion + facet terms (K) and boundary/source load (f).

    The time-discrete blocks are ``J_pp = M_S + dt K`` and
    ``L_p = C u_prev + M_S p_prev + dt f``.
    """
    K: sp.csr_matrix
    f: np.ndarray


def _side_terms(fd, side, kappa, n):
    cells, phi, grad = fd.sides[side]
    k = kappa[cells][:, None, None]
    flux = k * np.einsum("fqad,fd->fqa", grad, n)                   # kappa grad phi . n+
    return cells, phi, flux


def flow_operator(p_space: FnSpace, kappa, beta, cls: FacetClassification, bcs: BoundarySpec, t=0.0,
                  source=0.0, gravity=None, rho=1.0, include_cg_facets=False,
                  vol_degree=VOLUME_DEGREE, fac_degree=None) -> FlowOperator:
    mesh = p_space.mesh
    n_p = p_space.n_dofs
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= 0):
        raise AssemblyError("mobility must be positive on every cell")
    fac_degree = facet_degree(p_space) if fac_degree is None else fac_degree
    dofs = p_space.cell_dofs
    vol = volume_data(p_space, vol_degree)
    wk = vol.weights * kappa[:, None]
    mats = [_coo(np.einsum("cq,cqad,cqbd->cab", wk, vol.grad, vol.grad), dofs, dofs, (n_p, n_p))]

    f = np.zeros(n_p)
    src = bc_value(source, vol.points, t)
    f += _scatter(np.einsum("cq,cq,qa->ca", vol.weights, src, vol.phi), dofs, n_p)
    g = None if gravity is None or not np.any(gravity) else np.asarray(gravity, dtype=float)
    if g is not None:
        # kappa rho g . grad q moves to the load
        f += _scatter(np.einsum("cq,cqad,d->ca", wk * rho, vol.grad, g), dofs, n_p)

    for f_ in mesh.boundary_facets:
        if cls.labels[f_] not in bcs.flow:
            raise AssemblyError(f"boundary facet {int(f_)} has no flow condition")

    # interior facets
    if p_space.kind != "CG" or include_cg_facets:
        inner = mesh.interior_facets
        if len(inner):
            fd = facet_data(p_space, inner, fac_degree, two_sided=True)
            n = fd.normal
            cp, php, flp = _side_terms(fd, 0, kappa, n)
            cm, phm, flm = _side_terms(fd, 1, kappa, n)
            kp, km = kappa[cp], kappa[cm]
            delta = (km / (kp + km))[:, None, None]
            kap_e = 2 * kp * km / (kp + km)
            jump = np.concatenate([php, -phm], axis=2)
            avg = np.concatenate([delta * flp, (1 - delta) * flm], axis=2)
            pen = (beta / fd.h_e * kap_e)[:, None]
            w = fd.weights
            loc = -np.einsum("fq,fqi,fqj->fij", w, jump, avg)
            loc = loc + np.transpose(loc, (0, 2, 1))
            loc = loc + np.einsum("fq,fqi,fqj->fij", w * pen, jump, jump)
            rows = np.hstack([dofs[cp], dofs[cm]])
            mats.append(_coo(loc, rows, rows, (n_p, n_p)))
            if g is not None:
                gn = rho * (fd.normal @ g)
                avg_g = (delta[:, :, 0] * kp[:, None] + (1 - delta[:, :, 0]) * km[:, None]) * gn[:, None]
                f -= _scatter(np.einsum("fq,fq,fqi->fi", w, avg_g, jump), rows, n_p)

    # weak pressure Dirichlet and Neumann flux
    for label, bc in bcs.flow.items():
        facets = cls.labelled(label)
        if len(facets) == 0:
            continue
        fd = facet_data(p_space, facets, fac_degree, two_sided=False)
        cells, phi, flux = _side_terms(fd, 0, kappa, fd.normal)
        val = bc_value(bc.value, fd.points, t)
        w = fd.weights
        rows = dofs[cells]
        if bc.kind == "flux":
            f -= _scatter(np.einsum("fq,fq,fqa->fa", w, val, phi), rows, n_p)
            continue
        pen = (beta / fd.h_e * kappa[cells])[:, None]
        loc = -np.einsum("fq,fqi,fqj->fij", w, phi, flux)
        loc = loc + np.transpose(loc, (0, 2, 1))
        loc = loc + np.einsum("fq,fqi,fqj->fij", w * pen, phi, phi)
        mats.append(_coo(loc, rows, rows, (n_p, n_p)))
        f += _scatter(np.einsum("fq,fq,fqa->fa", w, val, -flux + pen[:, :, None] * phi), rows, n_p)
        if g is not None:
            gn = rho * (fd.normal @ g) * kappa[cells]
            f -= _scatter(np.einsum("fq,f,fqa->fa", w, gn, phi), rows, n_p)

    K = mats[0]
    for m in mats[1:]:
        K = K + m
    return FlowOperator(K.tocsr(), f)


@dataclass
class MassBalanceParts:
    J_pu: sp.csr_matrix
    J_pp: sp.csr_matrix
    L_p: np.ndarray


def assemble_mass_balance(u_space, p_space, materials, kappa, dt, u_prev, p_prev, cls, bcs, t=0.0,
                          beta=None, storage=None, coupling=None, operator=None) -> MassBalanceParts:
    """Backward-Euler blocks of the mass balance at time ``t``.

    ``storage``/``coupling``/``operator`` may be passed in when cached.
    """
    if dt <= 0:
        raise AssemblyError("time step must be positive")
    beta = BETA[p_space.kind] if beta is None else beta
    M_S = mass_matrix(p_space, materials.storage()) if storage is None else storage
    C = coupling_matrix(u_space, p_space, materials.rho * materials.alpha) if coupling is None else coupling
    if operator is None:
        operator = flow_operator(p_space, kappa, beta, cls, bcs, t, materials.source, materials.gravity,
                                 materials.rho)
    J_pp = (M_S + dt * operator.K).tocsr()
    L_p = C @ u_prev + M_S @ p_prev + dt * operator.f
    return MassBalanceParts(C, J_pp, L_p)


# -- block system ----------------------------------------------------------------------------------

@dataclass
class BlockSystem:
    J_uu: sp.csr_matrix
    J_up: sp.csr_matrix
    J_pu: sp.csr_matrix
    J_pp: sp.csr_matrix
    L_u: np.ndarray
    L_p: np.ndarray
    layout: Dict[str, tuple]
    fixed_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fixed_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_u(self):
        return self.J_uu.shape[0]

    @property
    def n_p(self):
        return self.J_pp.shape[0]

    def matrix(self):
        return sp.bmat([[self.J_uu, self.J_up], [self.J_pu, self.J_pp]], format="csr")

    def rhs(self):
        return np.concatenate([self.L_u, self.L_p])

    def sub_blocks(self):
        """Split into the 3x3 EG blocks [u | p_CG | p_DG0] when applicable."""
        if "p_dg0" not in self.layout:
            return None
        A = self.matrix()
        bounds = [self.layout[k] for k in ("u", "p_cg", "p_dg0")]
        return [[A[r0:r1, c0:c1] for (c0, c1) in bounds] for (r0, r1) in bounds]

    def export_matrix_market(self, directory, prefix=""):
        """Write each block as Matrix Market coordinate text."""
        os.makedirs(directory, exist_ok=True)
        paths = []
        for name in ("J_uu", "J_up", "J_pu", "J_pp"):
            path = os.path.join(directory, f"{prefix}{name}.mtx")
            scipy.io.mmwrite(path, sp.coo_matrix(getattr(self, name)), precision=17)
            paths.append(path)
        return paths


def block_layout(u_space, p_space):
    n_u = u_space.n_dofs
    layout = {"u": (0, n_u), "p": (n_u, n_u + p_space.n_dofs)}
    if isinstance(p_space, EgFnSpace):
        layout["p_cg"] = (n_u, n_u + p_space.n_cg)
        layout["p_dg0"] = (n_u + p_space.n_cg, n_u + p_space.n_dofs)
    return layout


def assemble_block_system(momentum: MomentumParts, mass: MassBalanceParts, layout) -> BlockSystem:
    n_u = momentum.J_uu.shape[0]
    n_p = mass.J_pp.shape[0]
    if layout["u"] != (0, n_u) or layout["p"] != (n_u, n_u + n_p):
        raise AssemblyError("block layout does not match the assembled parts")
    if momentum.J_up.shape != (n_u, n_p) or mass.J_pu.shape != (n_p, n_u):
        raise AssemblyError("coupling blocks do not conform")
    return BlockSystem(momentum.J_uu, momentum.J_up, mass.J_pu, mass.J_pp, momentum.L_u, mass.L_p,
                       layout, momentum.fixed_dofs, momentum.fixed_values)
