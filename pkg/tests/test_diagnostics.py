import csv
import math

import numpy as np
import pytest

from poroeg.config import parse_text
from poroeg.diagnostics import (CSV_COLUMNS, DiagnosticsError, StepDiagnostics, facet_fluxes, field_average,
                                local_mass_residual, numerical_flux, outlet_rate, recovery_factor,
                                write_diagnostics_csv)
from poroeg.forms import effective_beta, flow_operator
from poroeg.mesh import (BoundarySpec, FlowBC, MechanicalBC, box_regions, classify_facets, generate_box_mesh,
                         unit_square)
from poroeg.physics import MaterialField
from poroeg.scenarios import build_problem
from poroeg.solver import run, solve_sparse
from poroeg.spaces import build_space, interpolate


def _column(kind, P=2e5, kappa=3e-9, L=1.0):
    m = generate_box_mesh([(0, 0.2), (0, L)], [2, 8], 2)
    regions = list(box_regions(m.box_extents, 2))
    flow = {r: FlowBC("flux", 0.0) for r in regions}
    flow["bottom"] = FlowBC("pressure", P)
    flow["top"] = FlowBC("pressure", 0.0)
    bcs = BoundarySpec({r: MechanicalBC("displacement") for r in regions}, flow)
    cls = classify_facets(m, bcs)
    space = build_space(m, kind, 1)
    beta = effective_beta(1.0, space)
    k = np.full(m.n_cells, kappa)
    op = flow_operator(space, k, beta, cls, bcs)
    gauge = np.array([space.n_cg]) if kind == "EG" else np.zeros(0, dtype=np.int64)
    p = solve_sparse(op.K, op.f, gauge, np.zeros(len(gauge)))
    return m, space, p, k, cls, bcs, beta


@pytest.mark.parametrize("kind", ["CG", "EG", "DG"])
def test_steady_darcy_flux_in_column(kind):
    P, kappa, L = 2e5, 3e-9, 1.0
    m, space, p, k, cls, bcs, beta = _column(kind, P, kappa, L)
    flux, w, facets = numerical_flux(space, p, k, cls, bcs, beta)
    q = kappa * P / L                     # upward mass flux
    ny = m.facet_normals[facets, 1]
    np.testing.assert_allclose(flux, (q * ny)[:, None] * np.ones_like(flux), atol=1e-10 * q)


def test_uniform_pressure_has_no_interior_flux():
    m = unit_square(4)
    regions = list(box_regions(m.box_extents, 2))
    bcs = BoundarySpec({r: MechanicalBC("displacement") for r in regions}, {r: FlowBC("pressure", 7.0) for r in regions})
    cls = classify_facets(m, bcs)
    for kind in ("CG", "EG", "DG"):
        space = build_space(m, kind, 1)
        p = interpolate(space, lambda x: np.full(len(x), 7.0))
        k = 10.0 ** np.random.default_rng(0).uniform(-12, -8, m.n_cells)
        fl = facet_fluxes(space, p, k, cls, bcs, 2.0)
        assert np.abs(fl).max() <= 1e-14


def test_cg_flux_has_no_penalty_part():
    m, space, p, k, cls, bcs, _ = _column("CG")
    p = p + np.random.default_rng(1).standard_normal(len(p))
    inner = m.interior_facets
    a, _, _ = numerical_flux(space, p, k, cls, bcs, 1.0, facets=inner)
    b, _, _ = numerical_flux(space, p, k, cls, bcs, 100.0, facets=inner)
    np.testing.assert_array_equal(a, b)


def test_flux_seen_from_both_sides():
    m, space, p, k, cls, bcs, beta = _column("EG")
    p = p + 1e4 * np.random.default_rng(2).standard_normal(len(p))
    k = k * 10.0 ** np.random.default_rng(3).uniform(-2, 2, m.n_cells)
    inner = m.interior_facets
    a, _, _ = numerical_flux(space, p, k, cls, bcs, beta, facets=inner, side=0)
    b, _, _ = numerical_flux(space, p, k, cls, bcs, beta, facets=inner, side=1)
    assert np.abs(a + b).max() <= 1e-12 * np.abs(a).max()


def test_boundary_flux_single_sided():
    m, space, p, k, cls, bcs, beta = _column("DG")
    with pytest.raises(DiagnosticsError):
        numerical_flux(space, p, k, cls, bcs, beta, facets=m.boundary_facets, side=1)


@pytest.mark.parametrize("kind", ["CG", "EG", "DG"])
def test_steady_state_residual_vanishes(kind):
    m, space, p, k, cls, bcs, beta = _column(kind)
    u_space = build_space(m, "CG", 2, 2)
    mat = MaterialField.build(m.n_cells, K=1e9, nu=0.2, phi=0.2, c_f=1e-9, k_m0=3e-12, alpha=0.8)
    u = np.zeros(u_space.n_dofs)
    fl = facet_fluxes(space, p, k, cls, bcs, beta)
    r, rmax = local_mass_residual(u_space, space, mat, u, u, p, p, 1.0, fl)
    assert rmax <= 1e-12 * np.abs(fl).max()


def test_residual_needs_all_fluxes():
    m, space, p, k, cls, bcs, beta = _column("DG")
    u_space = build_space(m, "CG", 2, 2)
    mat = MaterialField.build(m.n_cells, K=1e9, nu=0.2, phi=0.2, c_f=1e-9, k_m0=3e-12, alpha=0.8)
    with pytest.raises(DiagnosticsError):
        local_mass_residual(u_space, space, mat, np.zeros(u_space.n_dofs), np.zeros(u_space.n_dofs), p, p, 1.0,
                            np.zeros(m.n_facets - 1))


def test_recovery_factor_arithmetic():
    np.testing.assert_array_equal(recovery_factor(np.zeros(5), 1.0, 1000.0, 2.0, 0.2), 0.0)
    Q, dt, N = 3.0, 0.5, 8
    rf = recovery_factor(np.full(N, Q), dt, 1000.0, 2.0, 0.25)
    np.testing.assert_allclose(rf, np.arange(1, N + 1) * dt * Q / (1000.0 * 2.0 * 0.25), rtol=1e-15)
    rf = recovery_factor([1.0, 2.0], [1.0, 3.0], 1.0, 1.0, 1.0)
    np.testing.assert_allclose(rf, [1.0, 7.0])


def test_outlet_rate():
    assert outlet_rate(np.array([1.0, 2.0, 4.0]), [0, 2]) == 5.0
    with pytest.raises(DiagnosticsError):
        outlet_rate(np.ones(3), [])


def test_field_average():
    assert field_average(np.full(7, 0.3)) == pytest.approx(0.3, rel=1e-15)
    assert field_average([1.0, 3.0]) == 2.0
    x = np.random.default_rng(4).lognormal(size=10_001)
    naive = 0.0
    for v in x:
        naive += float(v)
    assert field_average(x) == pytest.approx(naive / len(x), rel=1e-14)
    with pytest.raises(DiagnosticsError):
        field_average([])


def test_diagnostics_csv_layout(tmp_path):
    rows = [StepDiagnostics(1, 1.0, 2e-3, 2e-3, 0.1, 1e-8, -1e-4, 3),
            StepDiagnostics(2, 2.0, 1e-3, 1e-3, 1 / 3, 1e-8, -2e-4, 2)]
    write_diagnostics_csv(tmp_path / "d.csv", rows)
    with open(tmp_path / "d.csv") as fh:
        data = list(csv.reader(fh))
    assert data[0] == CSV_COLUMNS
    assert data[2][0] == "2" and data[2][-1] == "2"
    assert float(data[2][4]) == 1 / 3


TWO_LAYER = "scenario = two_layer\nmethod = {m}\ntime.tau = 5 s\ntime.outputs = 5 s\n"


def _two_layer(method):
    pb = build_problem(parse_text(TWO_LAYER.format(m=method))).problem
    res = run(pb)
    ratio = max(d.max_r_mass_rate / d.max_facet_flux for d in res.diagnostics)
    return pb, res, ratio


def test_conservation_eg_dg_and_cg_gap():
    ratios = {m: _two_layer(m)[2] for m in ("EG", "DG", "CG")}
    assert ratios["EG"] <= 1e-8 and ratios["DG"] <= 1e-8
    assert ratios["CG"] >= 1e2 * ratios["EG"]


def test_recovery_monotone_and_mobility_floor():
    pb, res, _ = _two_layer("EG")
    assert all(d.outflow_rate >= 0 for d in res.diagnostics)
    assert np.all(np.diff(res.recovery_factor) >= 0)
    assert all(d.kappa_bar >= pb.materials.kappa_r for d in res.diagnostics)
    assert math.isfinite(res.recovery_factor[-1]) and res.recovery_factor[-1] > 0
