"""Randomized invariants over meshes, spaces, operators and configs."""
import string

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from poroeg.acceptance import PROPERTIES
from poroeg.config import SCHEMA, ConfigError, parse_text
from poroeg.diagnostics import facet_fluxes, local_mass_residual, numerical_flux
from poroeg.forms import assemble_mass_balance, effective_beta, facet_data
from poroeg.mesh import BoundarySpec, FlowBC, MechanicalBC, box_regions, classify_facets, generate_box_mesh
from poroeg.physics import MaterialField, RandomFieldSpec, permeability_factor, sample_field
from poroeg.spaces import build_space, interpolate
from poroeg.verification import terzaghi_pressure

SETTINGS = settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.too_slow])
seeds = st.integers(0, 2**32 - 1)
dims = st.sampled_from([2, 3])
kinds = st.sampled_from(["CG", "EG", "DG"])


def _box(rng, dim):
    n = [int(v) for v in rng.integers(1, 4 if dim == 2 else 3, size=dim)]
    ext = [(float(a), float(a + b)) for a, b in zip(rng.uniform(-1, 1, dim), rng.uniform(0.3, 2.0, dim))]
    return generate_box_mesh(ext, n, dim), ext


def _bcs(rng, mesh):
    regions = list(box_regions(mesh.box_extents, mesh.dim))
    flow = {}
    for r in regions:
        if rng.random() < 0.5:
            flow[r] = FlowBC("pressure", float(rng.uniform(-1e5, 1e5)))
        else:
            flow[r] = FlowBC("flux", float(rng.uniform(-1e-3, 1e-3)))
    return BoundarySpec({r: MechanicalBC("displacement") for r in regions}, flow)


@pytest.mark.parametrize("name", sorted(PROPERTIES))
@SETTINGS
@given(seed=seeds, dim=dims)
def test_acceptance_property(name, seed, dim):
    assert PROPERTIES[name](np.random.default_rng(seed), dim)


@SETTINGS
@given(seed=seeds, dim=dims)
def test_measures_add_up(seed, dim):
    mesh, ext = _box(np.random.default_rng(seed), dim)
    L = np.array([b - a for a, b in ext])
    assert mesh.cell_volumes.sum() == pytest.approx(np.prod(L), rel=1e-12)
    surface = 2 * (L[0] + L[1]) if dim == 2 else 2 * (L[0] * L[1] + L[1] * L[2] + L[0] * L[2])
    assert mesh.facet_areas[mesh.boundary_facets].sum() == pytest.approx(surface, rel=1e-12)
    # divergence theorem per cell: sum_f |f| n_f (outward) = 0
    fc = mesh.facet_cells
    acc = np.zeros((mesh.n_cells, dim))
    w = mesh.facet_areas[:, None] * mesh.facet_normals
    np.add.at(acc, fc[:, 0], w)
    inner = fc[:, 1] >= 0
    np.add.at(acc, fc[inner, 1], -w[inner])
    assert np.abs(acc).max() <= 1e-12 * L.max() ** (dim - 1)


@SETTINGS
@given(seed=seeds, dim=dims)
def test_normals_point_from_plus_to_minus(seed, dim):
    mesh, _ = _box(np.random.default_rng(seed), dim)
    n = mesh.facet_normals
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, rtol=1e-13)
    c = mesh.cell_centroids
    fc = mesh.facet_cells
    inner = mesh.interior_facets
    assert np.all(np.einsum("fd,fd->f", c[fc[inner, 1]] - c[fc[inner, 0]], n[inner]) > 0)
    bnd = mesh.boundary_facets
    assert np.all(np.einsum("fd,fd->f", mesh.facet_centroids[bnd] - c[fc[bnd, 0]], n[bnd]) > 0)
    # normal is orthogonal to the facet
    v = mesh.vertices[mesh.facets]
    for k in range(1, dim):
        np.testing.assert_allclose(np.einsum("fd,fd->f", v[:, k] - v[:, 0], n), 0.0, atol=1e-13)


@SETTINGS
@given(seed=seeds, dim=dims, degree=st.integers(1, 2))
def test_eg_jump_is_dg0_difference(seed, dim, degree):
    rng = np.random.default_rng(seed)
    mesh, _ = _box(rng, dim)
    inner = mesh.interior_facets
    if len(inner) == 0:
        return
    space = build_space(mesh, "EG", degree)
    dofs = rng.standard_normal(space.n_dofs)
    fd = facet_data(space, inner, 2 * degree + 2, two_sided=True)
    vals = []
    for side in (0, 1):
        cells, phi, _ = fd.sides[side]
        vals.append(np.einsum("fqa,fa->fq", phi, dofs[space.cell_dofs[cells]]))
    c0 = dofs[space.n_cg + mesh.facet_cells[inner, 0]]
    c1 = dofs[space.n_cg + mesh.facet_cells[inner, 1]]
    np.testing.assert_allclose(vals[0] - vals[1], (c0 - c1)[:, None] * np.ones_like(vals[0]), atol=1e-12)


@SETTINGS
@given(seed=seeds, dim=dims, kind=st.sampled_from(["EG", "DG"]))
def test_flux_is_single_valued(seed, dim, kind):
    rng = np.random.default_rng(seed)
    mesh, _ = _box(rng, dim)
    inner = mesh.interior_facets
    if len(inner) == 0:
        return
    bcs = _bcs(rng, mesh)
    cls = classify_facets(mesh, bcs)
    space = build_space(mesh, kind, int(rng.integers(1, 3)))
    p = 1e5 * rng.standard_normal(space.n_dofs)
    k = 10.0 ** rng.uniform(-12, -6, mesh.n_cells)
    beta = effective_beta(float(rng.uniform(0.5, 2.0)), space)
    a, _, _ = numerical_flux(space, p, k, cls, bcs, beta, facets=inner, side=0)
    b, _, _ = numerical_flux(space, p, k, cls, bcs, beta, facets=inner, side=1)
    assert np.abs(a + b).max() <= 1e-12 * max(np.abs(a).max(), 1e-300)


@SETTINGS
@given(seed=seeds, dim=dims, kind=kinds)
def test_global_balance_matches_discrete_equation(seed, dim, kind):
    """Summed cell residuals equal the scheme tested with the constant function."""
    rng = np.random.default_rng(seed)
    mesh, _ = _box(rng, dim)
    bcs = _bcs(rng, mesh)
    cls = classify_facets(mesh, bcs)
    u_space = build_space(mesh, "CG", 2, dim)
    p_space = build_space(mesh, kind, int(rng.integers(1, 3)))
    mat = MaterialField.build(mesh.n_cells, K=float(rng.uniform(1e6, 1e10)), nu=0.25, phi=0.2,
                              c_f=float(rng.uniform(0, 1e-9)), k_m0=1e-13, alpha=float(rng.uniform(0.5, 1.0)))
    kappa = 10.0 ** rng.uniform(-11, -7, mesh.n_cells)
    dt = float(rng.uniform(0.1, 10.0))
    u_prev, u_n = 1e-4 * rng.standard_normal((2, u_space.n_dofs))
    p_prev, p_n = 1e5 * rng.standard_normal((2, p_space.n_dofs))
    beta = effective_beta(1.0, p_space)
    parts = assemble_mass_balance(u_space, p_space, mat, kappa, dt, u_prev, p_prev, cls, bcs, beta=beta)
    one = interpolate(p_space, lambda x: np.ones(len(x)))
    lhs = one @ (parts.J_pu @ u_n + parts.J_pp @ p_n - parts.L_p) / dt
    fl = facet_fluxes(p_space, p_n, kappa, cls, bcs, beta)
    r, _ = local_mass_residual(u_space, p_space, mat, u_n, u_prev, p_n, p_prev, dt, fl)
    scale = np.abs(fl).sum() + np.abs(parts.J_pp @ p_n).sum() / dt + abs(lhs)
    assert abs(r.sum() - lhs) <= 1e-10 * scale


@SETTINGS
@given(phi=st.floats(0.01, 0.9), a=st.floats(-0.99, 1.0), b=st.floats(-0.99, 1.0))
def test_permeability_increases_with_strain(phi, a, b):
    lo, hi = sorted((max(a, -phi * 0.99), max(b, -phi * 0.99)))
    assert permeability_factor(lo, phi) <= permeability_factor(hi, phi) * (1 + 1e-12)
    assert permeability_factor(0.0, phi) == 1.0


@SETTINGS
@given(n=st.integers(1, 60), t=st.floats(1e-4, 2.0))
def test_terzaghi_series_alternating_bound(n, t):
    """At z* = 1 the terms alternate in sign with decreasing size."""
    exact = terzaghi_pressure(1.0, t, n + 400)
    M = np.pi * (2 * n + 1) / 2
    assert abs(terzaghi_pressure(1.0, t, n) - exact) <= 2 / M * np.exp(-M**2 * t) + 1e-15


FLOAT_KEYS = {"material.K": (1e3, 1e12, "Pa"), "material.nu": (0.01, 0.49, ""), "material.phi": (0.01, 0.9, ""),
              "bc.sigma": (0.0, 1e8, "Pa"), "material.k": (1e-20, 1e-9, "m2")}


@SETTINGS
@given(data=st.data(), method=kinds, seed=st.integers(0, 2**31))
def test_config_round_trip(data, method, seed):
    lines = ["scenario = structured_2d", f"method = {method}", f"seed = {seed}"]
    for key, (lo, hi, unit) in FLOAT_KEYS.items():
        if data.draw(st.booleans()):
            v = data.draw(st.floats(lo, hi, allow_nan=False))
            lines.append(f"{key} = {v!r} {unit}".rstrip())
    # the step must divide the default 50 s horizon
    lines.append(f"time.dt = {50.0 / data.draw(st.integers(1, 1000))!r} s")
    cfg = parse_text("\n".join(lines) + "\n")
    again = parse_text(cfg.serialize())
    assert again.values == cfg.values and again.digest() == cfg.digest()


@SETTINGS
@given(key=st.text(string.ascii_lowercase + "._", min_size=1, max_size=20))
def test_unknown_keys_rejected(key):
    if key in SCHEMA:
        return
    with pytest.raises(ConfigError):
        parse_text(f"scenario = terzaghi\n{key} = 1\n")


@SETTINGS
@given(seed=st.integers(0, 2**62), n=st.integers(1, 500), stream=st.integers(0, 5))
def test_sampling_is_deterministic(seed, n, stream):
    spec = RandomFieldSpec("lognormal", 1.2e-8, 1.4e-16, 1.2e-13, 1.2e-6, seed)
    a = sample_field(spec, n, stream)
    assert np.array_equal(a, sample_field(spec, n, stream))
    assert np.all((a >= 1.2e-13) & (a <= 1.2e-6))
