import math

import numpy as np
import pytest
import scipy.sparse as sp

from poroeg.config import parse_text
from poroeg.mesh import generate_box_mesh, unit_square
from poroeg.forms import mass_matrix
from poroeg.scenarios import build_problem
from poroeg.solver import (FactorCache, SimState, SolverError, SparseFactor, TimeGrid, gauge_dofs, initial_equilibrium,
                           next_step_system, picard_increment_norm, run, solve_linear_block, solve_sparse)
from poroeg.spaces import build_space


def _cfg(text):
    return parse_text(text)


def _problem(text, mesh=None):
    return build_problem(_cfg(text), mesh).problem


SMALL_STRUCTURED = """
scenario = structured_2d
mesh.nx = 6
mesh.ny = 6
time.tau = 3 s
material.K = {K} GPa
coupling = {coupling}
method = {method}
"""


# -- linear algebra ---------------------------------------------------------------------

def test_identity_solve():
    e1 = np.zeros(5)
    e1[0] = 1.0
    np.testing.assert_array_equal(solve_sparse(sp.identity(5, format="csr"), e1), e1)


def test_permutation_consistency():
    rng = np.random.default_rng(0)
    A = sp.random(40, 40, density=0.1, random_state=1) + 10 * sp.identity(40)
    b = rng.standard_normal(40)
    perm = rng.permutation(40)
    x = solve_sparse(A.tocsr(), b)
    xp = solve_sparse(A.tocsr()[perm][:, perm], b[perm])
    np.testing.assert_allclose(xp, x[perm], rtol=1e-12, atol=1e-14)


def test_fixed_values_are_imposed():
    A = sp.csr_matrix(np.array([[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]]))
    b = np.array([1.0, 2.0, 3.0])
    x = solve_sparse(A, b, np.array([2]), np.array([0.5]))
    assert x[2] == 0.5
    dense = np.linalg.solve(A.toarray()[:2, :2], b[:2] - A.toarray()[:2, 2] * 0.5)
    np.testing.assert_allclose(x[:2], dense, rtol=1e-14)


def test_singular_matrix_raises():
    A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SolverError):
        solve_sparse(A, np.array([1.0, 0.0]))


def test_factor_cache_reuses_identical_matrix():
    A = (sp.random(30, 30, density=0.2, random_state=3) + 5 * sp.identity(30)).tocsr()
    cache = FactorCache()
    f1 = cache.get(A, np.zeros(0, dtype=np.int64))
    assert cache.get(A.copy(), np.zeros(0, dtype=np.int64)) is f1
    B = A.copy()
    B[0, 0] += 1.0
    assert cache.get(B, np.zeros(0, dtype=np.int64)) is not f1
    assert isinstance(f1, SparseFactor)


def _column_problem(method="EG"):
    text = f"scenario = terzaghi\nmethod = {method}\ntime.tau = 2 s\ntime.outputs = 2 s\n"
    mesh = generate_box_mesh([(0, 0.1), (0, 1)], [1, 1], 2)
    return _problem(text, mesh)


def _state_from_equilibrium(pb):
    u0, p0, eps, kappa = initial_equilibrium(pb)
    return SimState(u0.copy(), p0.copy(), u0, p0, eps, kappa)


@pytest.mark.parametrize("method", ["CG", "EG", "DG"])
def test_two_triangle_step_matches_dense_oracle(method):
    pb = _column_problem(method)
    system = next_step_system(pb, _state_from_equilibrium(pb), 1.0)
    w = solve_linear_block(system)
    A = system.matrix().toarray()
    b = system.rhs()
    fixed = np.concatenate([system.fixed_dofs, gauge_dofs(system.layout)])
    vals = np.concatenate([system.fixed_values, np.zeros(len(fixed) - len(system.fixed_dofs))])
    free = np.setdiff1d(np.arange(len(b)), fixed)
    x = np.zeros(len(b))
    x[fixed] = vals
    x[free] = np.linalg.solve(A[np.ix_(free, free)], b[free] - A[np.ix_(free, fixed)] @ vals)
    np.testing.assert_allclose(w, x, rtol=1e-9, atol=1e-9 * np.abs(x).max())
    # residual bound of the solve
    r = A[free] @ w - b[free]
    assert np.abs(r).max() <= 1e-9 * (np.abs(A).max() * np.abs(w).max() + np.abs(b).max())


def test_gauge_only_for_eg():
    pb = _column_problem("EG")
    assert list(gauge_dofs(next_step_system(pb, _state_from_equilibrium(pb), 1.0).layout)) == [18 + 4]
    pb = _column_problem("DG")
    assert len(gauge_dofs(next_step_system(pb, _state_from_equilibrium(pb), 1.0).layout)) == 0


# -- initial state ------------------------------------------------------------------------------

def test_equilibrium_without_load_is_zero():
    pb = _problem("scenario = terzaghi\nbc.sigma = 0 Pa\nbc.p0 = 0 Pa\n")
    u0, p0, eps, kappa = initial_equilibrium(pb)
    assert np.all(u0 == 0) and np.all(eps == 0)
    np.testing.assert_array_equal(kappa, pb.materials.kappa0())


def test_terzaghi_undrained_state_has_no_strain():
    pb = _problem("scenario = terzaghi\n")
    _, _, eps, _ = initial_equilibrium(pb)
    assert np.abs(eps).max() <= 1e-10


def test_reservoir_equilibrium_refines_consistently():
    base = "scenario = structured_2d\ntime.tau = 1 s\nmesh.nx = {n}\nmesh.ny = {n}\n"
    top = []
    for n in (8, 16):
        pb = _problem(base.format(n=n))
        u0, *_ = initial_equilibrium(pb)
        assert np.all(np.isfinite(u0)) and np.abs(u0).max() > 0
        top.append(u0.reshape(-1, 2)[:, 1].min())
    assert top[0] == pytest.approx(top[1], rel=5e-3)


# -- time marching --------------------------------------------------------------------------------

def test_unloaded_equilibrium_is_stationary():
    text = "scenario = custom\nmesh.nx = 4\nmesh.ny = 4\nbc.sigma = 0 Pa\nbc.p_D = 5 MPa\nbc.p0 = 5 MPa\ntime.tau = 4 s\n"
    pb = _problem(text)
    res = run(pb)
    p0 = res.initial.p_curr
    assert np.abs(res.final.p_curr - p0).max() <= 1e-9 * 5e6
    assert np.abs(res.recovery_factor).max() <= 1e-12


def test_independent_run_freezes_mobility():
    pb = _problem(SMALL_STRUCTURED.format(K=1, coupling="independent", method="EG"))
    seen = []
    run(pb, callback=lambda st: seen.append(st.kappa_solve.copy()))
    assert len(seen) == 3
    assert all(np.array_equal(seen[0], k) for k in seen)
    np.testing.assert_array_equal(seen[0], pb.materials.kappa0())


def test_dependent_run_converges_below_tolerance():
    pb = _problem(SMALL_STRUCTURED.format(K=1, coupling="dependent", method="EG"))
    histories = []
    res = run(pb, callback=lambda st: histories.append(list(st.zeta_history)))
    assert all(h[-1] <= pb.xi for h in histories)
    assert all(len(h) == n for h, n in zip(histories, res.iteration_counts))


def test_accepted_state_is_a_fixed_point():
    pb = _problem(SMALL_STRUCTURED.format(K=1, coupling="dependent", method="DG"))
    ops_M = (mass_matrix(pb.u_space), mass_matrix(pb.p_space))
    changes = []

    def check(st):
        dt = pb.time.steps[st.n - 1]
        prev = SimState(st.u_prev, st.p_prev, st.u_prev, st.p_prev, st.eps_v, st.kappa, t=st.t - dt)
        w = solve_linear_block(next_step_system(pb, prev, dt, kappa=st.kappa))
        changes.append(picard_increment_norm(w, np.concatenate([st.u_curr, st.p_curr]), *ops_M,
                                             p_unit=pb.zeta_unit))

    run(pb, callback=check)
    assert max(changes) <= pb.xi


def test_rigid_limit_needs_at_most_two_iterations():
    text = SMALL_STRUCTURED.format(K=1e6, coupling="dependent", method="EG") + "material.alpha = 1\n"
    res = run(_problem(text))
    assert res.iteration_counts.max() <= 2
    assert np.abs(res.final.eps_v).max() < 1e-6


def test_semi_implicit_consistency_in_rigid_limit():
    text = SMALL_STRUCTURED.format(K=1e6, coupling="{c}", method="EG") + "material.alpha = 1\n"
    dep = run(_problem(text.replace("{c}", "dependent")))
    ind = run(_problem(text.replace("{c}", "independent")))
    np.testing.assert_allclose(dep.final.p_curr, ind.final.p_curr, rtol=1e-6, atol=1e-6 * 1e7)
    np.testing.assert_allclose(dep.recovery_factor, ind.recovery_factor, rtol=1e-5)


def test_backward_euler_is_first_order():
    finals = []
    for dt in (2.0, 1.0, 0.5):
        text = f"scenario = terzaghi\nmethod = EG\nmesh.nx = 1\nmesh.ny = 10\ntime.dt = {dt} s\ntime.tau = 8 s\n"
        finals.append(run(_problem(text)).final.p_curr)
    order = math.log2(np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2]))
    assert 0.8 <= order <= 1.2


def test_iteration_cap_reports_history():
    text = SMALL_STRUCTURED.format(K=1, coupling="dependent", method="EG") + "solver.max_iter = 1\nsolver.xi = 1e-30\n"
    with pytest.raises(SolverError) as err:
        run(_problem(text))
    assert len(err.value.info["zeta_history"]) == 1


# -- Picard norm -------------------------------------------------------------------------------------

def test_increment_norm_zero_and_constant():
    m = unit_square(3)
    u, p = build_space(m, "CG", 2, 2), build_space(m, "EG", 1)
    M_u, M_p = mass_matrix(u), mass_matrix(p)
    rng = np.random.default_rng(1)
    w = rng.standard_normal(u.n_dofs + p.n_dofs)
    assert picard_increment_norm(w, w, M_u, M_p) == 0.0
    dw = np.zeros_like(w)
    dw[u.n_dofs + p.n_cg:] = -2.5          # constant through the cell part only
    assert picard_increment_norm(w + dw, w, M_u, M_p) == pytest.approx(2.5, rel=1e-13)
    assert picard_increment_norm(w + dw, w, M_u, M_p, p_unit=1e3) == pytest.approx(2.5e-3, rel=1e-13)


def test_increment_norm_against_closed_form_gram():
    """EG_1 on two triangles: P1 mass |T|/12 (1 + delta_ij), hat-constant |T|/3, constant |T|."""
    m = unit_square(1)
    u, p = build_space(m, "CG", 2, 2), build_space(m, "EG", 1)
    G = np.zeros((6, 6))
    for c in range(2):
        area = m.cell_volumes[c]
        vs = list(m.cells[c])
        for a in vs:
            for b in vs:
                G[a, b] += area / 12 * (2 if a == b else 1)
            G[a, 4 + c] += area / 3
            G[4 + c, a] += area / 3
        G[4 + c, 4 + c] += area
    rng = np.random.default_rng(9)
    dp = rng.standard_normal(6)
    w_prev = rng.standard_normal(u.n_dofs + 6)
    w = w_prev.copy()
    w[u.n_dofs:] += dp
    z = picard_increment_norm(w, w_prev, mass_matrix(u), mass_matrix(p))
    assert z == pytest.approx(math.sqrt(dp @ G @ dp), rel=1e-12)


def test_increment_norm_layout_mismatch():
    M = sp.identity(3, format="csr")
    with pytest.raises(SolverError):
        picard_increment_norm(np.zeros(5), np.zeros(6), M, M)
    with pytest.raises(SolverError):
        picard_increment_norm(np.zeros(6), np.zeros(6), M, M, p_unit=0.0)


# -- time grid ------------------------------------------------------------------------------------------

def test_time_grid():
    g = TimeGrid.uniform(0.5, 3.0)
    assert len(g.steps) == 6 and g.tau == 3.0
    np.testing.assert_allclose(g.times, np.arange(1, 7) * 0.5)
    with pytest.raises(SolverError):
        TimeGrid.uniform(0.7, 1.0)
    with pytest.raises(SolverError):
        TimeGrid([1.0, -1.0])
