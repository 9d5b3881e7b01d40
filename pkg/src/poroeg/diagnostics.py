"""Post-step quantities: numerical flux, local mass residual, recovery factor."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
import numpy as np

from .forms import bc_value, facet_data, facet_degree, volume_data, BETA
from .spaces import eval_at_reference


class DiagnosticsError(ValueError):
    pass


def _facet_trace(space, dofs, fd, side):
    cells, phi, grad = fd.sides[side]
    loc = np.asarray(dofs)[space.cell_dofs[cells]]
    return np.einsum("fqa,fa->fq", phi, loc), np.einsum("fqad,fa->fqd", grad, loc)


def numerical_flux(p_space, p, kappa, cls, bcs, beta=None, t=0.0, gravity=None, rho=1.0,
                   facets=None, side=0):
    """Normal mass flux v.n at the facet quadrature points.

    Returns ``(flux, weights, facets)``; ``flux`` is oriented along the
    outward normal of the ``+`` cell (``side=0``) or of the ``-`` cell
    (``side=1``, interior facets only).  Integrated facet fluxes are
    ``(flux * weights).sum(axis=1)``.
    """
    mesh = p_space.mesh
    beta = BETA[p_space.kind] if beta is None else beta
    facets = np.arange(mesh.n_facets) if facets is None else np.asarray(facets)
    kappa = np.asarray(kappa, dtype=float)
    g = None if gravity is None or not np.any(gravity) else np.asarray(gravity, dtype=float)
    deg = facet_degree(p_space)
    kinds = cls.flow[facets]
    inner = facets[kinds == 0]
    results = {}
    if len(inner):
        fd = facet_data(p_space, inner, deg, two_sided=True)
        s_own, s_nb = (0, 1) if side == 0 else (1, 0)
        n = fd.normal if side == 0 else -fd.normal
        v_o, g_o = _facet_trace(p_space, p, fd, s_own)
        v_n, g_n = _facet_trace(p_space, p, fd, s_nb)
        k_o = kappa[fd.sides[s_own][0]][:, None]
        k_n = kappa[fd.sides[s_nb][0]][:, None]
        delta = k_n / (k_o + k_n)
        kap_e = 2 * k_o * k_n / (k_o + k_n)
        gn_o = np.einsum("fqd,fd->fq", g_o, n)
        gn_n = np.einsum("fqd,fd->fq", g_n, n)
        if g is not None:
            gn_o = gn_o - rho * (n @ g)[:, None]
            gn_n = gn_n - rho * (n @ g)[:, None]
        val = -(delta * k_o * gn_o + (1 - delta) * k_n * gn_n)
        if p_space.kind != "CG":
            val = val + beta / fd.h_e[:, None] * kap_e * (v_o - v_n)
        for i, f in enumerate(inner):
            results[int(f)] = (val[i], fd.weights[i])

    bnd = facets[kinds != 0]
    if len(bnd):
        if side != 0:
            raise DiagnosticsError("boundary facets have a single side")
        for label, bc in bcs.flow.items():
            sel = bnd[cls.labels[bnd] == label]
            if len(sel) == 0:
                continue
            fd = facet_data(p_space, sel, deg, two_sided=False)
            bval = bc_value(bc.value, fd.points, t)
            if bc.kind == "flux":
                val = bval
            else:
                v, gr = _facet_trace(p_space, p, fd, 0)
                k = kappa[fd.sides[0][0]][:, None]
                gn = np.einsum("fqd,fd->fq", gr, fd.normal)
                if g is not None:
                    gn = gn - rho * (fd.normal @ g)[:, None]
                val = -k * gn + beta / fd.h_e[:, None] * k * (v - bval)
            for i, f in enumerate(sel):
                results[int(f)] = (val[i], fd.weights[i])
        missing = [int(f) for f in bnd if int(f) not in results]
        if missing:
            raise DiagnosticsError(f"unclassified boundary facets {missing[:5]}")

    flux = np.array([results[int(f)][0] for f in facets])
    weights = np.array([results[int(f)][1] for f in facets])
    return flux, weights, facets


def facet_fluxes(p_space, p, kappa, cls, bcs, beta=None, t=0.0, gravity=None, rho=1.0):
    """Integrated flux through every facet, along the ``+`` outward normal."""
    flux, w, _ = numerical_flux(p_space, p, kappa, cls, bcs, beta, t, gravity, rho)
    return (flux * w).sum(axis=1)


def cell_integrals(space, dofs, degree=4, divergence=False):
    """Per-cell integral of a field (or of its divergence for vector fields)."""
    vol = volume_data(space, degree)
    from .quadrature import simplex_rule
    rule = simplex_rule(space.mesh.dim, degree)
    val, grad = eval_at_reference(space, dofs, rule.points)
    if divergence:
        val = np.trace(grad, axis1=-2, axis2=-1)
    return np.einsum("cq,cq->c", vol.weights, val)


def local_mass_residual(u_space, p_space, materials, u_n, u_prev, p_n, p_prev, dt, fluxes, t=0.0):
    """Per-cell mass balance residual (kg/s) and its maximum absolute value.

    ``fluxes`` are integrated facet fluxes oriented along the ``+`` normal.
    """
    mesh = p_space.mesh
    fluxes = np.asarray(fluxes)
    if fluxes.shape != (mesh.n_facets,) or not np.all(np.isfinite(fluxes)):
        raise DiagnosticsError("need one finite flux per facet")
    S = materials.storage()
    dp = cell_integrals(p_space, (np.asarray(p_n) - p_prev) / dt)
    du = cell_integrals(u_space, (np.asarray(u_n) - u_prev) / dt, divergence=True)
    r = S * dp + materials.rho * materials.alpha * du
    # piecewise-constant material data, so the integrals factor out
    fc = mesh.facet_cells
    r += np.bincount(fc[:, 0], weights=fluxes, minlength=mesh.n_cells)
    inner = fc[:, 1] >= 0
    r -= np.bincount(fc[inner, 1], weights=fluxes[inner], minlength=mesh.n_cells)
    src = materials.source
    if callable(src) or np.any(np.asarray(src) != 0):
        vol = volume_data(p_space)
        r -= np.einsum("cq,cq->c", vol.weights, bc_value(src, vol.points, t))
    return r, float(np.max(np.abs(r)))


def outlet_rate(fluxes, outlet_facets):
    if len(outlet_facets) == 0:
        raise DiagnosticsError("empty outlet facet set")
    return float(np.sum(np.asarray(fluxes)[outlet_facets]))


def recovery_factor(outflow_rates, dts, rho, V0, phi_bar):
    """Cumulative produced mass over the initial fluid mass, per step."""
    q = np.asarray(outflow_rates, dtype=float)
    dts = np.broadcast_to(np.asarray(dts, dtype=float), q.shape)
    return np.cumsum(q * dts) / (rho * V0 * phi_bar)


def field_average(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DiagnosticsError("empty field")
    return math.fsum(values.ravel()) / values.size


@dataclass
class StepDiagnostics:
    step: int
    time: float
    max_r_mass_rate: float
    max_r_mass_mass: float
    RF: float
    kappa_bar: float
    epsv_bar: float
    picard_iterations: int
    outflow_rate: float = 0.0
    max_facet_flux: float = 0.0


CSV_COLUMNS = ["step", "time", "max_r_mass_rate", "max_r_mass_mass", "RF", "kappa_bar", "epsv_bar",
               "picard_iterations"]


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_diagnostics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in CSV_COLUMNS])
