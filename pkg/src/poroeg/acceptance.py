"""Acceptance checks run by ``poroeg verify`` and the test suite.

Each criterion is a set of named clauses; a criterion passes when all its
clauses hold.  Scenario runs are cached so criteria sharing a run (for
example conservation and recovery comparisons) solve it once.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .config import parse_text
from .forms import coupling_matrix, effective_beta, facet_data, flow_operator, mass_matrix
from .mesh import BoundarySpec, FlowBC, MechanicalBC, box_regions, classify_facets, generate_box_mesh
from .physics import RandomFieldSpec, sample_random_fields, update_permeability
from .scenarios import build_problem, profile_points
from .solver import run
from .spaces import build_space, evaluate, interpolate
from .verification import convergence_rate, convergence_study

log = logging.getLogger(__name__)

POISSON_LEVELS = {2: {1: (8, 16, 32), 2: (8, 16, 32)}, 3: {1: (4, 8, 16), 2: (2, 4, 8)}}
OSCILLATION_TOL = 1e-3        # of the applied load
OSCILLATION_WINDOW = 4        # cells on each side of the interface
STRUCTURED_MESH = 20
STRUCTURED_K = (8.0, 2.0, 1.0)  # GPa
RANDOM_2D_TAU = 10.0
RANDOM_3D_TAU = 2.0
REFERENCE_DOF_COUNTS = {"cg": 2198, "eg": 6432, "dg": 12702, "cells": 4234}


@dataclass
class CriterionResult:
    number: int
    title: str
    clauses: Dict[str, bool] = field(default_factory=dict)
    details: List[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.clauses) and all(self.clauses.values())

    def check(self, name, ok, detail=None):
        self.clauses[name] = bool(ok)
        if detail:
            self.details.append(detail)

    def line(self) -> str:
        failed = [k for k, v in self.clauses.items() if not v]
        status = "PASS" if self.passed else "FAIL"
        tail = f" (failed: {', '.join(failed)})" if failed else ""
        return f"[{status}] criterion {self.number:2d} {self.title}{tail}; {'; '.join(self.details)}"


class RunCache:
    """Scenario runs keyed by their config text."""

    def __init__(self):
        self._runs = {}
        self.meshes = []

    def get(self, text):
        if text not in self._runs:
            cfg = parse_text(text)
            setup = build_problem(cfg)
            t0 = time.perf_counter()
            res = run(setup.problem)
            log.info("ran %s in %.1f s", text.replace("\n", "; "), time.perf_counter() - t0)
            self._runs[text] = (cfg, setup, res)
            self.meshes.append(setup.problem.mesh)
        return self._runs[text]


def _cfg(**kw):
    lines = [f"{k.replace('__', '.')} = {v}" for k, v in kw.items()]
    return "\n".join(lines) + "\n"


def terzaghi_text(method):
    return _cfg(scenario="terzaghi", method=method)


def two_layer_text(method, t_first=25.0):
    return _cfg(scenario="two_layer", method=method, time__tau=f"{t_first:g} s", time__outputs=f"{t_first:g} s")


def structured_text(method, K, coupling):
    return _cfg(scenario="structured_2d", method=method, coupling=coupling, material__K=f"{K:g} GPa",
                mesh__nx=STRUCTURED_MESH, mesh__ny=STRUCTURED_MESH)


def random_text(scenario, method):
    tau = RANDOM_2D_TAU if scenario == "random_2d" else RANDOM_3D_TAU
    return _cfg(scenario=scenario, method=method, time__tau=f"{tau:g} s", time__outputs=f"{tau:g} s")


def oscillation_count(y, p, interface, h, window=OSCILLATION_WINDOW, tol=0.0):
    """Sign changes of successive increments of ``p`` sampled along ``y``.

    Only samples within ``window`` cells of the interface count, and
    increments with magnitude at most ``tol`` are ignored.
    """
    order = np.argsort(y)
    y, p = np.asarray(y)[order], np.asarray(p)[order]
    sel = np.abs(y - interface) <= window * h
    d = np.diff(p[sel])
    d = d[np.abs(d) > tol]
    return int(np.sum(np.sign(d[1:]) != np.sign(d[:-1])))


def _mass_ratio(res):
    rmax = max(r.max_r_mass_rate for r in res.diagnostics)
    fmax = max(r.max_facet_flux for r in res.diagnostics)
    return rmax, fmax


# -- criteria ---------------------------------------------------------------------------------

def criterion_1(cache: RunCache) -> CriterionResult:
    res = CriterionResult(1, "Poisson convergence")
    for dim in (2, 3):
        t0 = time.perf_counter()
        for kind in ("EG", "DG"):
            for k in (1, 2):
                rows = convergence_study(dim, kind, k, POISSON_LEVELS[dim][k])
                slope = convergence_rate([r.l2_error for r in rows], [r.h for r in rows])
                res.check(f"{dim}D {kind}{k} slope", abs(slope - (k + 1)) <= 0.2, f"{dim}D {kind}{k} {slope:.3f}")
        dt = time.perf_counter() - t0
        limit = 60.0 if dim == 2 else 300.0
        res.check(f"{dim}D runtime", dt < limit, f"{dim}D {dt:.0f} s")
    return res


def criterion_2(cache: RunCache) -> CriterionResult:
    res = CriterionResult(2, "Terzaghi profiles")
    for method in ("CG", "EG", "DG"):
        t0 = time.perf_counter()
        cfg, setup, out = cache.get(terzaghi_text(method))
        dt = time.perf_counter() - t0
        pts = profile_points(cfg, setup.problem.mesh, per_cell=2)
        worst = 0.0
        for t in (25.0, 50.0, 100.0, 250.0):
            p = evaluate(setup.problem.p_space, out.snapshots[t].p_curr, pts)
            exact = setup.reference.pressure(pts[:, 1], t)
            worst = max(worst, float(np.max(np.abs(p - exact))) / cfg["bc.sigma"])
        res.check(f"{method} deviation", worst < 0.02, f"{method} max|dp|/sigma {worst:.4f}")
        res.check(f"{method} runtime", dt < 30.0)
    return res


def two_layer_profiles(cache: RunCache):
    """Pressure over the load along the sampling line at the first output time."""
    out = {}
    for method in ("CG", "EG", "DG"):
        cfg, setup, r = cache.get(two_layer_text(method))
        pts = profile_points(cfg, setup.problem.mesh)
        t = max(r.snapshots)
        out[method] = (pts[:, 1], evaluate(setup.problem.p_space, r.snapshots[t].p_curr, pts) / cfg["bc.sigma"])
    h = cfg["mesh.ly"] / cfg["mesh.ny"]
    return out, cfg["geometry.interface"], h


def criterion_3(cache: RunCache) -> CriterionResult:
    res = CriterionResult(3, "two-layer interface")
    prof, iface, h = two_layer_profiles(cache)
    counts = {m: oscillation_count(y, p, iface, h, tol=OSCILLATION_TOL) for m, (y, p) in prof.items()}
    res.details.append(f"sign changes (tol {OSCILLATION_TOL:g} sigma) " +
                       " ".join(f"{m}={c}" for m, c in counts.items()))
    res.check("CG oscillates", counts["CG"] >= 2)
    res.check("EG monotone", counts["EG"] == 0)
    res.check("DG monotone", counts["DG"] == 0)
    pe, pd = prof["EG"][1], prof["DG"][1]
    rel = float(np.linalg.norm(pe - pd) / np.linalg.norm(pe))
    res.check("EG-DG agreement", rel <= 1e-6, f"EG-DG rel L2 {rel:.2e}")
    return res


HETEROGENEOUS = {
    "two_layer": lambda m: two_layer_text(m),
    "structured_2d": lambda m: structured_text(m, 8.0, "independent"),
    "random_2d": lambda m: random_text("random_2d", m),
    "random_3d": lambda m: random_text("random_3d", m),
}


def criterion_4(cache: RunCache) -> CriterionResult:
    res = CriterionResult(4, "local mass conservation")
    for name, make in HETEROGENEOUS.items():
        vals = {}
        for method in ("EG", "DG", "CG"):
            _, _, r = cache.get(make(method))
            vals[method] = _mass_ratio(r)
        for method in ("EG", "DG"):
            rmax, fmax = vals[method]
            res.check(f"{name} {method}", rmax <= 1e-8 * fmax)
        ratio = vals["CG"][0] / max(vals["EG"][0], np.finfo(float).tiny)
        res.check(f"{name} CG/EG", ratio >= 1e2)
        res.details.append(f"{name} r/flux EG {vals['EG'][0] / vals['EG'][1]:.1e} DG "
                           f"{vals['DG'][0] / vals['DG'][1]:.1e} CG/EG {ratio:.1e}")
    return res


def structured_rf(cache: RunCache, coupling):
    return {K: cache.get(structured_text("EG", K, coupling))[2].diagnostics[-1].RF for K in STRUCTURED_K}


def criterion_5(cache: RunCache) -> CriterionResult:
    res = CriterionResult(5, "compaction ordering")
    rf = structured_rf(cache, "dependent")
    res.check("RF(1) > RF(2) > RF(8)", rf[1.0] > rf[2.0] > rf[8.0])
    ratio = rf[1.0] / rf[8.0]
    res.check("ratio in [2, 10]", 2.0 <= ratio <= 10.0)
    res.details.append(" ".join(f"RF(K={K:g})={v:.4e}" for K, v in rf.items()) + f" ratio {ratio:.2f}")
    return res


def criterion_6(cache: RunCache) -> CriterionResult:
    res = CriterionResult(6, "coupling-model gap")
    dep, ind = structured_rf(cache, "dependent"), structured_rf(cache, "independent")
    gaps = {K: abs(dep[K] - ind[K]) for K in STRUCTURED_K}
    res.check("gap <= 0.05", max(gaps.values()) <= 0.05)
    ordered = [gaps[K] for K in sorted(STRUCTURED_K, reverse=True)]
    res.check("gap grows as K decreases", all(a < b for a, b in zip(ordered, ordered[1:])))
    res.details.append(" ".join(f"gap(K={K:g})={g:.2e}" for K, g in gaps.items()))
    return res


def criterion_7(cache: RunCache) -> CriterionResult:
    res = CriterionResult(7, "EG vs DG recovery")
    rf = {m: np.array([r.RF for r in cache.get(random_text("random_2d", m))[2].diagnostics])
          for m in ("EG", "DG", "CG")}
    gap = float(np.max(np.abs(rf["EG"] - rf["DG"])))
    cg = float(np.max(np.abs(rf["CG"] - rf["EG"])))
    res.check("|RF_EG - RF_DG| <= 0.02", gap <= 0.02)
    res.check("CG deviation >= 5x gap", cg >= 5.0 * gap)
    res.details.append(f"max EG-DG {gap:.2e} max CG-EG {cg:.2e}")
    return res


def dof_identities(mesh):
    """(N_EG == N_CG + n_cells for k = 1, 2, N_DG1 == (d+1) n_cells)."""
    nc, d = mesh.n_cells, mesh.dim
    eg = all(build_space(mesh, "EG", k).n_dofs == build_space(mesh, "CG", k).n_dofs + nc for k in (1, 2))
    dg = build_space(mesh, "DG", 1).n_dofs == (d + 1) * nc
    return eg, dg


def criterion_8(cache: RunCache) -> CriterionResult:
    res = CriterionResult(8, "DOF identities")
    t = REFERENCE_DOF_COUNTS
    res.check("table fixture EG", t["eg"] == t["cg"] + t["cells"])
    res.check("table fixture DG", t["dg"] == 3 * t["cells"])
    meshes = list(cache.meshes)
    for dim in (2, 3):
        for n in sorted({n for lv in POISSON_LEVELS[dim].values() for n in lv}):
            meshes.append(generate_box_mesh([(0, 1)] * dim, [n] * dim, dim))
    bad = [i for i, m in enumerate(meshes) if not all(dof_identities(m))]
    res.check("generated meshes", not bad, f"{len(meshes)} meshes checked")
    return res


def criterion_9(cache: RunCache) -> CriterionResult:
    res = CriterionResult(9, "Picard iterations")
    counts = {K: cache.get(structured_text("EG", K, "dependent"))[2].iteration_counts for K in STRUCTURED_K}
    lo = min(min(c) for c in counts.values())
    hi = max(max(c) for c in counts.values())
    res.check("counts in [2, 10]", lo >= 2 and hi <= 10)
    med = {K: float(np.median(c)) for K, c in counts.items()}
    res.check("median(K=1) >= median(K=8)", med[1.0] >= med[8.0])
    res.details.append(f"range [{lo}, {hi}] " + " ".join(f"median(K={K:g})={m:g}" for K, m in med.items()))
    return res


# -- property suites ---------------------------------------------------------------------------

def _random_box(rng, dim):
    n = [int(v) for v in rng.integers(1, 5 if dim == 2 else 3, size=dim) + 1]
    ext = [(0.0, float(v)) for v in rng.uniform(0.5, 2.0, size=dim)]
    return generate_box_mesh(ext, n, dim)


def _random_flow_bcs(rng, mesh):
    regions = box_regions(mesh.box_extents, mesh.dim)
    kinds = rng.integers(0, 2, size=len(regions))
    flow = {r: FlowBC("pressure" if k else "flux", 0.0) for r, k in zip(regions, kinds)}
    return BoundarySpec(mechanical={r: MechanicalBC("displacement") for r in regions}, flow=flow)


def property_facet_partition(rng, dim):
    mesh = _random_box(rng, dim)
    cls = classify_facets(mesh, _random_flow_bcs(rng, mesh))
    counts = [int(np.sum(cls.flow == k)) for k in (0, 1, 2)]
    interior = int(np.sum(mesh.facet_cells[:, 1] >= 0))
    return sum(counts) == mesh.n_facets and counts[0] == interior


def property_cg_jump(rng, dim):
    mesh = _random_box(rng, dim)
    k = int(rng.integers(1, 3))
    space = build_space(mesh, "CG", k)
    dofs = rng.standard_normal(space.n_dofs)
    inner = np.flatnonzero(mesh.facet_cells[:, 1] >= 0)
    if len(inner) == 0:
        return True
    fd = facet_data(space, inner, 2 * k + 2, two_sided=True)
    vals = []
    for side in (0, 1):
        cells, phi, _ = fd.sides[side]
        vals.append(np.einsum("fqa,fa->fq", phi, dofs[space.cell_dofs[cells]]))
    return float(np.max(np.abs(vals[0] - vals[1]))) <= 1e-12 * max(1.0, np.abs(dofs).max())


def _heterogeneous_flow(rng, mesh, kind, k):
    space = build_space(mesh, kind, k)
    bcs = _random_flow_bcs(rng, mesh)
    cls = classify_facets(mesh, bcs)
    kappa = 10.0 ** rng.uniform(-12, -6, size=mesh.n_cells)
    beta = effective_beta(1.0, space)
    return space, bcs, cls, kappa, beta


def property_jpp_symmetry(rng, dim):
    mesh = _random_box(rng, dim)
    kind = ("CG", "EG", "DG")[int(rng.integers(0, 3))]
    space, bcs, cls, kappa, beta = _heterogeneous_flow(rng, mesh, kind, int(rng.integers(1, 3)))
    op = flow_operator(space, kappa, beta, cls, bcs)
    J = (mass_matrix(space, rng.uniform(0, 1e-9, mesh.n_cells)) + rng.uniform(0.1, 10) * op.K).tocsr()
    return abs(J - J.T).max() <= 1e-10 * abs(J).max()


def property_adjoint_coupling(rng, dim):
    mesh = _random_box(rng, dim)
    kind = ("CG", "EG", "DG")[int(rng.integers(0, 3))]
    u_space = build_space(mesh, "CG", 2, dim)
    p_space = build_space(mesh, kind, int(rng.integers(1, 3)))
    alpha = rng.uniform(0.1, 1.0, mesh.n_cells)
    rho = float(rng.uniform(500, 1500))
    J_pu = coupling_matrix(u_space, p_space, rho * alpha)
    J_up = -coupling_matrix(u_space, p_space, alpha).T
    return abs(J_pu + rho * J_up.T).max() <= 1e-10 * abs(J_pu).max()


def property_patch(rng, dim):
    """Constant pressure with matching Dirichlet data solves the flow operator."""
    mesh = _random_box(rng, dim)
    kind = ("CG", "EG", "DG")[int(rng.integers(0, 3))]
    c = float(rng.uniform(-1e6, 1e6))
    space = build_space(mesh, kind, int(rng.integers(1, 3)))
    regions = list(box_regions(mesh.box_extents, mesh.dim))
    flow = {r: FlowBC("flux", 0.0) for r in regions}
    flow[regions[int(rng.integers(0, len(regions)))]] = FlowBC("pressure", c)
    bcs = BoundarySpec(mechanical={r: MechanicalBC("displacement") for r in regions}, flow=flow)
    cls = classify_facets(mesh, bcs)
    kappa = 10.0 ** rng.uniform(-12, -6, size=mesh.n_cells)
    op = flow_operator(space, kappa, effective_beta(1.0, space), cls, bcs)
    p = interpolate(space, lambda x: np.full(len(x), c))
    r = op.K @ p - op.f
    return float(np.abs(r).max()) <= 1e-10 * abs(op.K).max() * max(1.0, abs(c))


def property_permeability_floor(rng, dim):
    n = 200
    phi = rng.uniform(1e-3, 0.5, n)
    eps = rng.uniform(-0.6, 0.1, n)
    k0 = 10.0 ** rng.uniform(-20, -11, n)
    kappa_r = float(10.0 ** rng.uniform(-18, -14))
    _, kappa = update_permeability(k0, eps, phi, 1000.0, 1e-3, kappa_r)
    return bool(np.all(kappa >= kappa_r))


def property_seed_determinism(rng, dim):
    seed = int(rng.integers(0, 2**62))
    phi = RandomFieldSpec("normal", 0.2, 0.01, 0.001, 0.4, seed)
    kap = RandomFieldSpec("lognormal", 1.2e-8, 1.4e-16, 1.2e-13, 1.2e-6, seed)
    a = sample_random_fields(300, phi, kap)
    b = sample_random_fields(300, phi, kap)
    return all(np.array_equal(x, y) for x, y in zip(a, b))


PROPERTIES: Dict[str, Callable] = {
    "facet partition": property_facet_partition,
    "CG jump zero": property_cg_jump,
    "J_pp symmetry": property_jpp_symmetry,
    "J_pu = -rho J_up^T": property_adjoint_coupling,
    "patch test": property_patch,
    "permeability floor": property_permeability_floor,
    "seed determinism": property_seed_determinism,
}


def criterion_10(cache: RunCache, samples=6, seed=20201) -> CriterionResult:
    res = CriterionResult(10, "property suites")
    rng = np.random.default_rng(seed)
    for name, prop in PROPERTIES.items():
        ok = all(prop(rng, dim) for dim in (2, 3) for _ in range(samples))
        res.check(name, ok)
    res.details.append(f"{len(PROPERTIES)} properties x {2 * samples} random cases")
    return res


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9, criterion_10]


def run_acceptance(only=None, report: Optional[Callable[[str], None]] = print,
                   cache: Optional[RunCache] = None) -> List[CriterionResult]:
    """Evaluate the criteria (all, or the numbers in ``only``) in order."""
    cache = RunCache() if cache is None else cache
    results = []
    for crit in CRITERIA:
        number = int(crit.__name__.split("_")[1])
        if only and number not in only:
            continue
        t0 = time.perf_counter()
        res = crit(cache)
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if report is not None:
            report(res.line())
    return results
