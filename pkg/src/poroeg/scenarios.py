"""Built-in test cases: geometry, materials, loads and time grids.

All values are SI.  ``scenario_defaults`` gives the settings a config file
starts from; ``build_problem`` turns a validated config into a
:class:`~poroeg.solver.Problem`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .forms import BETA
from .mesh import (BoundarySpec, FlowBC, MechanicalBC, Mesh, box_regions, classify_facets, generate_box_mesh,
                   read_mesh)
from .physics import KAPPA_R, MaterialField, RandomFieldSpec, read_fields_csv, sample_random_fields
from .solver import Problem, TimeGrid
from .spaces import build_space

_COMMON = {
    "method": "EG",
    "degree": 1,
    "coupling": "independent",
    "seed": 0,
    "output.dir": "out",
    "output.vtk": True,
    "output.matrices": False,
    "material.rho": 1000.0,
    "material.mu": 1e-3,
    "material.kappa_r": KAPPA_R,
    "solver.xi": 1e-6,
    "solver.max_iter": 50,
    "solver.relative": False,
    "solver.zeta_unit": 1e3,
    "solver.penalty": "trace",
    "bc.q_D": 0.0,
    "bc.outlet": "top",
}

_CONSOLIDATION = {
    "mesh.dim": 2, "mesh.nx": 2, "mesh.ny": 20, "mesh.lx": 0.1, "mesh.ly": 1.0,
    "material.K": 1e6, "material.nu": 0.25, "material.alpha": 1.0, "material.phi": 0.3, "material.c_f": 0.0,
    "material.k": 1e-12,
    "bc.sigma": 1e3, "bc.p_D": 0.0, "bc.p0": 1e3,
    "time.dt": 1.0, "time.tau": 250.0, "time.outputs": (25.0, 50.0, 100.0, 250.0),
}

_RESERVOIR = {
    "material.nu": 0.2, "material.alpha": 0.79, "material.c_f": 1e-10, "material.K": 8e9,
    "bc.sigma": 20e6, "bc.p_D": 1e6, "bc.p0": 10e6,
    "time.dt": 1.0, "time.tau": 50.0, "time.outputs": (1.0, 10.0, 50.0),
}

_RANDOM = {
    "random.phi_mean": 0.2, "random.phi_var": 0.01, "random.phi_min": 0.001, "random.phi_max": 0.4,
    "random.kappa_mean": 1.2e-8, "random.kappa_var": 1.4e-16, "random.kappa_min": 1.2e-13,
    "random.kappa_max": 1.2e-6,
}

_DEFAULTS = {
    "poisson_convergence": {"mesh.dim": 2, "mesh.levels": (8, 16, 32), "poisson.degrees": (1, 2),
                            "poisson.methods": ("EG", "DG")},
    "terzaghi": dict(_CONSOLIDATION),
    "two_layer": dict(_CONSOLIDATION, **{"material.k2": 1e-16, "geometry.interface": 0.5}),
    "structured_2d": dict(_RESERVOIR, **{
        "mesh.dim": 2, "mesh.nx": 40, "mesh.ny": 40, "mesh.lx": 1.0, "mesh.ly": 1.0, "material.phi": 0.2,
        "material.k": 1e-12, "material.k2": 1e-16, "geometry.band_min": 0.4, "geometry.band_max": 0.6}),
    "random_2d": dict(_RESERVOIR, **_RANDOM, **{
        "mesh.dim": 2, "mesh.nx": 40, "mesh.ny": 40, "mesh.lx": 1.0, "mesh.ly": 1.0}),
    "random_3d": dict(_RESERVOIR, **_RANDOM, **{
        "mesh.dim": 3, "mesh.nx": 9, "mesh.ny": 9, "mesh.nz": 9, "mesh.lx": 1.0, "mesh.ly": 1.0, "mesh.lz": 1.0,
        "bc.sigma_x": 15e6, "bc.sigma_y": 15e6}),
    "custom": dict(_RESERVOIR, **{
        "mesh.dim": 2, "mesh.nx": 20, "mesh.ny": 20, "mesh.lx": 1.0, "mesh.ly": 1.0, "material.phi": 0.2,
        "material.k": 1e-12}),
}


class ScenarioError(ValueError):
    pass


def scenario_defaults(name, method="EG"):
    if name not in _DEFAULTS:
        raise ScenarioError(f"unknown scenario {name!r}")
    out = dict(_COMMON)
    out.update(_DEFAULTS[name])
    out["method"] = method
    if name != "poisson_convergence":
        out["solver.beta"] = BETA[method]
    else:
        for k in [k for k in out if k.startswith(("material.", "solver.", "bc.", "time."))]:
            del out[k]
        out["solver.beta"] = BETA[method]
        out["solver.penalty"] = "trace"
    return out


# -- geometry and boundary data -------------------------------------------------------------

def make_mesh(cfg) -> Mesh:
    if cfg.get("mesh.file"):
        mesh = read_mesh(cfg["mesh.file"])
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        ext = list(zip(lo, hi))
        mesh.tag_boundary(box_regions(ext, mesh.dim))
        mesh.box_extents = tuple(ext)
        return mesh
    dim = cfg["mesh.dim"]
    if dim == 2:
        return generate_box_mesh([(0, cfg["mesh.lx"]), (0, cfg["mesh.ly"])], [cfg["mesh.nx"], cfg["mesh.ny"]], 2)
    if dim == 3:
        return generate_box_mesh([(0, cfg["mesh.lx"]), (0, cfg["mesh.ly"]), (0, cfg["mesh.lz"])],
                                 [cfg["mesh.nx"], cfg["mesh.ny"], cfg["mesh.nz"]], 3)
    raise ScenarioError("mesh.dim must be 2 or 3")


def loaded_box_bcs(dim, sigma, p_D, q_D=0.0, outlet="top", sigma_x=0.0, sigma_y=0.0) -> BoundarySpec:
    """Compressive loads on the upper faces, rollers on the opposite faces.

    The pressure condition sits on the ``outlet`` face; every other face
    carries the flux ``q_D`` (zero: sealed).
    """
    if dim == 2:
        mech = {"left": MechanicalBC("displacement", 0.0, [0]), "right": MechanicalBC("displacement", 0.0, [0]),
                "bottom": MechanicalBC("displacement", 0.0, [1]), "top": MechanicalBC("traction", (0.0, -sigma))}
        faces = ("left", "right", "bottom", "top")
    else:
        mech = {"left": MechanicalBC("displacement", 0.0, [0]), "front": MechanicalBC("displacement", 0.0, [1]),
                "bottom": MechanicalBC("displacement", 0.0, [2]),
                "right": MechanicalBC("traction", (-sigma_x, 0.0, 0.0)),
                "back": MechanicalBC("traction", (0.0, -sigma_y, 0.0)),
                "top": MechanicalBC("traction", (0.0, 0.0, -sigma))}
        faces = ("left", "right", "front", "back", "bottom", "top")
    if outlet not in faces:
        raise ScenarioError(f"bc.outlet must be one of {faces}")
    flow = {f: (FlowBC("pressure", p_D) if f == outlet else FlowBC("flux", q_D)) for f in faces}
    return BoundarySpec(mech, flow)


def vertical_axis(mesh):
    return mesh.dim - 1


def _permeability(cfg, mesh):
    name = cfg.scenario
    y = mesh.cell_centroids[:, vertical_axis(mesh)]
    k = np.full(mesh.n_cells, cfg["material.k"]) if "material.k" in cfg else None
    if name == "two_layer":
        k = np.where(y > cfg["geometry.interface"], cfg["material.k"], cfg["material.k2"])
    elif name == "structured_2d" or (name == "custom" and "geometry.band_min" in cfg):
        band = (y > cfg["geometry.band_min"]) & (y < cfg["geometry.band_max"])
        k = np.where(band, cfg.get("material.k2", cfg["material.k"]), cfg["material.k"])
    return k


def random_specs(cfg):
    seed = int(cfg.get("seed", 0))
    phi = RandomFieldSpec("normal", cfg["random.phi_mean"], cfg["random.phi_var"], cfg["random.phi_min"],
                          cfg["random.phi_max"], seed)
    kap = RandomFieldSpec("lognormal", cfg["random.kappa_mean"], cfg["random.kappa_var"], cfg["random.kappa_min"],
                          cfg["random.kappa_max"], seed)
    return phi, kap


def make_materials(cfg, mesh) -> MaterialField:
    rho, mu = cfg["material.rho"], cfg["material.mu"]
    if cfg.get("random.fields_file"):
        phi, kappa0 = read_fields_csv(cfg["random.fields_file"])
        if len(phi) != mesh.n_cells:
            raise ScenarioError(f"field file has {len(phi)} cells, mesh has {mesh.n_cells}")
        k_m0 = kappa0 * mu / rho
    elif "random.phi_mean" in cfg:
        phi, kappa0 = sample_random_fields(mesh, *random_specs(cfg))
        k_m0 = kappa0 * mu / rho
    else:
        phi = cfg["material.phi"]
        k_m0 = _permeability(cfg, mesh)
    kw = {}
    if "material.alpha" in cfg:
        kw["alpha"] = cfg["material.alpha"]
    else:
        kw["K_s"] = cfg["material.K_s"]
    return MaterialField.build(mesh.n_cells, K=cfg["material.K"], nu=cfg["material.nu"], phi=phi,
                               c_f=cfg["material.c_f"], k_m0=k_m0, rho=rho, mu=mu, kappa_r=cfg["material.kappa_r"],
                               **kw)


@dataclass
class Setup:
    problem: Problem
    config: object
    reference: Optional[object] = None


def build_problem(cfg, mesh: Optional[Mesh] = None) -> Setup:
    """Assemble-ready problem for every time-dependent scenario."""
    if cfg.scenario == "poisson_convergence":
        raise ScenarioError("poisson_convergence is a steady study; use run_poisson_study")
    mesh = make_mesh(cfg) if mesh is None else mesh
    dim = mesh.dim
    bcs = loaded_box_bcs(dim, cfg["bc.sigma"], cfg["bc.p_D"], cfg["bc.q_D"], cfg["bc.outlet"],
                         cfg.get("bc.sigma_x", 0.0), cfg.get("bc.sigma_y", 0.0))
    cls = classify_facets(mesh, bcs)
    u_space = build_space(mesh, "CG", 2, dim)
    p_space = build_space(mesh, cfg.method, cfg["degree"])
    materials = make_materials(cfg, mesh)
    grid = TimeGrid.uniform(cfg["time.dt"], cfg["time.tau"])
    pb = Problem(u_space=u_space, p_space=p_space, materials=materials, bcs=bcs, cls=cls, time=grid,
                 p0=cfg["bc.p0"], beta=cfg["solver.beta"], coupling=cfg["coupling"], xi=cfg["solver.xi"],
                 max_iter=cfg["solver.max_iter"], relative=cfg["solver.relative"],
                 zeta_unit=cfg["solver.zeta_unit"], outlet=(cfg["bc.outlet"],),
                 penalty=cfg["solver.penalty"],
                 snapshot_times=tuple(cfg.get("time.outputs", ())))
    ref = None
    if cfg.scenario == "terzaghi":
        from .verification import TerzaghiParams
        ref = TerzaghiParams(sigma=cfg["bc.sigma"], K=cfg["material.K"], nu=cfg["material.nu"],
                             k=cfg["material.k"], mu=cfg["material.mu"], H=cfg["mesh.ly"], top=cfg["mesh.ly"])
    return Setup(pb, cfg, ref)


def profile_points(cfg, mesh, per_cell=1):
    """Sample points on a vertical line, ``per_cell`` per cell layer.

    The line sits at 0.3 of the first grid column so that it crosses the
    triangles away from their edges.
    """
    ax = vertical_axis(mesh)
    n = cfg["mesh.nz"] if ax == 2 else cfg["mesh.ny"]
    height = cfg["mesh.lz"] if ax == 2 else cfg["mesh.ly"]
    frac = (np.arange(n * per_cell) + 0.5) / (n * per_cell)
    pts = np.zeros((len(frac), mesh.dim))
    pts[:, 0] = 0.3 * cfg["mesh.lx"] / cfg["mesh.nx"]
    if mesh.dim == 3:
        pts[:, 1] = 0.1 * cfg["mesh.ly"] / cfg["mesh.ny"]
    pts[:, ax] = frac * height
    return pts
