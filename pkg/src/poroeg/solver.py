"""Backward-Euler time marching, Picard coupling and the direct block solve."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import diagnostics as dg
from .forms import (BETA, BlockSystem, MassBalanceParts, MomentumParts, assemble_block_system, block_layout,
                    coupling_matrix, effective_beta, displacement_constraints, flow_operator, mass_matrix, stiffness_matrix,
                    traction_vector)
from .mesh import BoundarySpec, FacetClassification
from .physics import MaterialField, update_permeability, volumetric_strain
from .spaces import FnSpace, interpolate

log = logging.getLogger(__name__)

RESIDUAL_FACTOR = 1e-9
PIVOT_RATIO = 1e3 * np.finfo(float).eps


class SolverError(RuntimeError):
    """Linear or nonlinear solve failure; ``info`` carries diagnostics."""

    def __init__(self, message, **info):
        super().__init__(message)
        self.info = info


# -- linear solve -------------------------------------------------------------------------

def gauge_dofs(layout) -> np.ndarray:
    """Dofs pinned to remove the EG null mode.

    CG_k already contains the constants, so (CG = c, DG0 = -c) is the zero
    function; pinning one cell constant removes that direction without
    changing the discrete function space.
    """
    if "p_dg0" in layout:
        start, stop = layout["p_dg0"]
        if stop > start:
            return np.array([start], dtype=np.int64)
    return np.zeros(0, dtype=np.int64)


class SparseFactor:
    """Sparse LU of ``A`` with some entries of the solution prescribed.

    Rows and columns of the fixed entries are removed and their values
    lifted to the right-hand side.  The reduced matrix is symmetrically
    scaled to unit diagonal and factored once; :meth:`solve` can then be
    called for any number of right-hand sides.
    """

    def __init__(self, A, fixed=None):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise SolverError("system is not square", shape=A.shape)
        A.sort_indices()
        self.A = A
        self.fixed = np.zeros(0, dtype=np.int64) if fixed is None else np.asarray(fixed, dtype=np.int64)
        self.free = np.setdiff1d(np.arange(n), self.fixed)
        rows = A[self.free]
        A_ff = rows[:, self.free]
        self.A_fc = rows[:, self.fixed]
        d = np.abs(A_ff.diagonal())
        d[d == 0] = 1.0
        self.s = 1.0 / np.sqrt(d)
        S = sp.diags(self.s)
        self.As = (S @ A_ff @ S).tocsc()
        self.lu = self._factor()

    def _factor(self):
        # finite element blocks are structurally symmetric: a minimum degree
        # ordering of A + A^T with diagonal preference fills far less than
        # COLAMD; fall back to COLAMD with partial pivoting if it breaks down
        attempts = [dict(permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1, options=dict(SymmetricMode=True)),
                    dict(permc_spec="COLAMD")]
        info = {}
        for opts in attempts:
            try:
                lu = spla.splu(self.As, **opts)
            except RuntimeError as exc:
                info[opts["permc_spec"]] = str(exc)
                continue
            piv = np.abs(lu.U.diagonal())
            if piv.size and piv.min() <= PIVOT_RATIO * piv.max():
                info[opts["permc_spec"]] = dict(min_pivot=float(piv.min()), max_pivot=float(piv.max()),
                                                pivot_index=int(np.argmin(piv)))
                continue
            return lu
        raise SolverError("sparse LU failed or is numerically rank-deficient", n=len(self.free), **info)

    def matches(self, A, fixed) -> bool:
        """True if ``(A, fixed)`` is the system this object factored."""
        A = sp.csr_matrix(A)
        A.sort_indices()
        fixed = np.asarray(fixed, dtype=np.int64)
        return (A.shape == self.A.shape and np.array_equal(fixed, self.fixed)
                and np.array_equal(A.indptr, self.A.indptr) and np.array_equal(A.indices, self.A.indices)
                and np.array_equal(A.data, self.A.data))

    def solve(self, b, fixed_values=None, refine=2):
        b = np.asarray(b, dtype=float)
        n = self.A.shape[0]
        if b.shape != (n,):
            raise SolverError("right-hand side does not conform", shape=self.A.shape, rhs=b.shape)
        fixed_values = np.zeros(len(self.fixed)) if fixed_values is None else np.asarray(fixed_values, dtype=float)
        x = np.zeros(n)
        x[self.fixed] = fixed_values
        rs = self.s * (b[self.free] - self.A_fc @ fixed_values)
        y = self.lu.solve(rs)
        for _ in range(refine):
            y = y + self.lu.solve(rs - self.As @ y)
        x[self.free] = self.s * y
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite solution")
        res = np.abs(self.A @ x - b)
        res[self.fixed] = 0.0
        scale = (np.abs(self.A.data).max() if self.A.nnz else 0.0) * np.abs(x).max() + np.abs(b).max()
        if res.max() > RESIDUAL_FACTOR * scale:
            raise SolverError("residual check failed", residual=float(res.max()), scale=float(scale))
        return x


def solve_sparse(A, b, fixed=None, fixed_values=None, refine=2):
    """Solve ``A x = b`` with ``x[fixed] = fixed_values``."""
    return SparseFactor(A, fixed).solve(b, fixed_values, refine)


class FactorCache:
    """Keeps the last factorization and reuses it while the matrix is unchanged."""

    def __init__(self):
        self.factor: Optional[SparseFactor] = None
        self.hits = 0

    def get(self, A, fixed) -> SparseFactor:
        if self.factor is not None and self.factor.matches(A, fixed):
            self.hits += 1
            return self.factor
        self.factor = None  # release memory before the next factorization
        self.factor = SparseFactor(A, fixed)
        return self.factor


def solve_linear_block(system: BlockSystem, cache: Optional[FactorCache] = None) -> np.ndarray:
    """Direct solve of the monolithic system; returns w = (u, p)."""
    gauge = gauge_dofs(system.layout)
    fixed = np.concatenate([system.fixed_dofs, gauge])
    vals = np.concatenate([system.fixed_values, np.zeros(len(gauge))])
    A = system.matrix()
    factor = SparseFactor(A, fixed) if cache is None else cache.get(A, fixed)
    return factor.solve(system.rhs(), vals)


# -- time grid and state -----------------------------------------------------------------

@dataclass
class TimeGrid:
    """Step sizes of (0, tau]; ``t^0 = 0``."""
    steps: np.ndarray

    def __post_init__(self):
        self.steps = np.atleast_1d(np.asarray(self.steps, dtype=float))
        if self.steps.size == 0 or np.any(self.steps <= 0) or not np.all(np.isfinite(self.steps)):
            raise SolverError("time steps must be positive and finite")

    @classmethod
    def uniform(cls, dt, tau):
        if dt <= 0 or tau <= 0:
            raise SolverError("dt and tau must be positive")
        n = int(round(tau / dt))
        if n < 1 or abs(n * dt - tau) > 1e-9 * tau:
            raise SolverError(f"tau = {tau} is not a whole number of steps of {dt}")
        return cls(np.full(n, float(dt)))

    @property
    def tau(self):
        return float(np.sum(self.steps))

    @property
    def times(self):
        return np.cumsum(self.steps)


@dataclass
class SimState:
    u_prev: np.ndarray
    p_prev: np.ndarray
    u_curr: np.ndarray
    p_curr: np.ndarray
    eps_v: np.ndarray
    kappa: np.ndarray
    t: float = 0.0
    n: int = 0
    iota: int = 0
    zeta: float = 0.0
    iteration_counts: List[int] = field(default_factory=list)
    zeta_history: List[float] = field(default_factory=list)
    kappa_solve: Optional[np.ndarray] = None   # mobility used in the last solve

    def snapshot(self):
        return replace(self, u_prev=self.u_prev.copy(), p_prev=self.p_prev.copy(), u_curr=self.u_curr.copy(),
                       p_curr=self.p_curr.copy(), eps_v=self.eps_v.copy(), kappa=self.kappa.copy(),
                       iteration_counts=list(self.iteration_counts), zeta_history=list(self.zeta_history),
                       kappa_solve=None if self.kappa_solve is None else self.kappa_solve.copy())


# -- problem definition -------------------------------------------------------------------------

@dataclass
class Problem:
    """Everything a time-marching run needs."""
    u_space: FnSpace
    p_space: FnSpace
    materials: MaterialField
    bcs: BoundarySpec
    cls: FacetClassification
    time: TimeGrid
    p0: object = 0.0
    beta: Optional[float] = None
    coupling: str = "independent"
    xi: float = 1e-6
    max_iter: int = 50
    relative: bool = False
    zeta_unit: float = 1e3
    outlet: Sequence[str] = ()
    snapshot_times: Sequence[float] = ()
    penalty: str = "trace"

    def __post_init__(self):
        if self.beta is None:
            self.beta = BETA[self.p_space.kind]
        self.beta_eff = effective_beta(self.beta, self.p_space, self.penalty)
        if self.coupling not in ("independent", "dependent"):
            raise SolverError(f"unknown coupling {self.coupling!r}")
        if self.xi <= 0:
            raise SolverError("Picard tolerance must be positive")
        if self.zeta_unit <= 0:
            raise SolverError("pressure unit of the Picard norm must be positive")
        if self.max_iter < 1:
            raise SolverError("iteration cap must be >= 1")

    @property
    def mesh(self):
        return self.p_space.mesh

    def outlet_facets(self):
        labels = self.outlet or [k for k, bc in self.bcs.flow.items() if bc.kind == "pressure"]
        return np.flatnonzero(np.isin(self.cls.labels, list(labels)))


class _Operators:
    """Time- and mobility-independent pieces, assembled once."""

    def __init__(self, pb: Problem):
        m = pb.materials
        self.layout = block_layout(pb.u_space, pb.p_space)
        self.J_uu = stiffness_matrix(pb.u_space, m)
        self.C = coupling_matrix(pb.u_space, pb.p_space, m.rho * m.alpha)
        self.J_up = -coupling_matrix(pb.u_space, pb.p_space, m.alpha).T.tocsr()
        self.M_S = mass_matrix(pb.p_space, m.storage())
        self.M_u = mass_matrix(pb.u_space)
        self.M_p = mass_matrix(pb.p_space)


def _momentum(pb: Problem, ops: _Operators, t) -> MomentumParts:
    L_u = traction_vector(pb.u_space, pb.cls, pb.bcs, t)
    fixed, vals = displacement_constraints(pb.u_space, pb.cls, pb.bcs, t)
    return MomentumParts(ops.J_uu, ops.J_up, L_u, fixed, vals)


def _step_system(pb: Problem, ops: _Operators, kappa, dt, t, u_prev, p_prev) -> BlockSystem:
    m = pb.materials
    op = flow_operator(pb.p_space, kappa, pb.beta_eff, pb.cls, pb.bcs, t, m.source, m.gravity, m.rho)
    J_pp = (ops.M_S + dt * op.K).tocsr()
    L_p = ops.C @ u_prev + ops.M_S @ p_prev + dt * op.f
    return assemble_block_system(_momentum(pb, ops, t), MassBalanceParts(ops.C, J_pp, L_p), ops.layout)


def next_step_system(pb: Problem, state: SimState, dt, kappa=None) -> BlockSystem:
    """Block system of the step that follows ``state``, for inspection or export."""
    kappa = state.kappa if kappa is None else kappa
    return _step_system(pb, _Operators(pb), kappa, dt, state.t + dt, state.u_curr, state.p_curr)


def _split(pb: Problem, w):
    n_u = pb.u_space.n_dofs
    return w[:n_u], w[n_u:]


def picard_increment_norm(w_iota, w_prev, M_u, M_p, relative=False, p_unit=1.0):
    """L2 norm of the increment on the product space via mass matrices.

    Pressures are measured in multiples of ``p_unit`` (Pa) and
    displacements in meters.
    """
    w_iota = np.asarray(w_iota, dtype=float)
    w_prev = np.asarray(w_prev, dtype=float)
    n_u, n_p = M_u.shape[0], M_p.shape[0]
    if w_iota.shape != (n_u + n_p,) or w_prev.shape != w_iota.shape:
        raise SolverError("increment vectors do not match the space layout",
                          expected=n_u + n_p, got=(w_iota.shape, w_prev.shape))
    if p_unit <= 0:
        raise SolverError("pressure unit must be positive", p_unit=p_unit)
    w_iota = np.concatenate([w_iota[:n_u], w_iota[n_u:] / p_unit])
    w_prev = np.concatenate([w_prev[:n_u], w_prev[n_u:] / p_unit])
    du, dp = (w_iota - w_prev)[:n_u], (w_iota - w_prev)[n_u:]
    z2 = du @ (M_u @ du) + dp @ (M_p @ dp)
    zeta = float(np.sqrt(max(z2, 0.0)))
    if relative:
        u, p = w_iota[:n_u], w_iota[n_u:]
        ref = float(np.sqrt(max(u @ (M_u @ u) + p @ (M_p @ p), 0.0)))
        return zeta / ref if ref > 0 else zeta
    return zeta


def initial_pressure(pb: Problem):
    p0 = pb.p0
    if isinstance(p0, np.ndarray) and p0.shape == (pb.p_space.n_dofs,):
        return p0.astype(float).copy()
    if callable(p0):
        return interpolate(pb.p_space, p0)
    return interpolate(pb.p_space, lambda x: np.full(len(x), float(p0)))


def initial_equilibrium(pb: Problem, ops: Optional[_Operators] = None, update_kappa=False):
    """Momentum balance alone with p = p0; returns ``(u0, p0, eps_v0, kappa0)``."""
    ops = _Operators(pb) if ops is None else ops
    p0 = initial_pressure(pb)
    mom = _momentum(pb, ops, 0.0)
    u0 = solve_sparse(ops.J_uu, mom.L_u - ops.J_up @ p0, mom.fixed_dofs, mom.fixed_values)
    _, eps = volumetric_strain(pb.u_space, u0)
    m = pb.materials
    if update_kappa:
        _, kappa = update_permeability(m.k_m0, eps, m.phi, m.rho, m.mu, m.kappa_r)
    else:
        kappa = m.kappa0()
    return u0, p0, eps, kappa


# -- runs ------------------------------------------------------------------------------------

@dataclass
class RunResult:
    diagnostics: List[dg.StepDiagnostics]
    snapshots: Dict[float, SimState]
    initial: SimState
    final: SimState
    residuals: List[np.ndarray] = field(default_factory=list)

    @property
    def recovery_factor(self):
        return np.array([d.RF for d in self.diagnostics])

    @property
    def iteration_counts(self):
        return np.array([d.picard_iterations for d in self.diagnostics])


class _Recorder:
    def __init__(self, pb: Problem, keep_residuals=False):
        self.pb = pb
        m = pb.materials
        mesh = pb.mesh
        self.outlet = pb.outlet_facets()
        self.V0 = float(mesh.cell_volumes.sum())
        self.phi_bar = float(np.sum(m.phi * mesh.cell_volumes) / self.V0)
        self.produced = 0.0
        self.rows: List[dg.StepDiagnostics] = []
        self.snapshots: Dict[float, SimState] = {}
        self.residuals: List[np.ndarray] = []
        self.keep = keep_residuals
        self.wanted = sorted(float(t) for t in pb.snapshot_times)

    def record(self, st: SimState, dt, iterations):
        pb = self.pb
        m = pb.materials
        fluxes = dg.facet_fluxes(pb.p_space, st.p_curr, st.kappa_solve, pb.cls, pb.bcs, pb.beta_eff, st.t,
                                 m.gravity, m.rho)
        r, _ = dg.local_mass_residual(pb.u_space, pb.p_space, m, st.u_curr, st.u_prev, st.p_curr, st.p_prev,
                                      dt, fluxes, st.t)
        q = dg.outlet_rate(fluxes, self.outlet) if len(self.outlet) else 0.0
        self.produced += q * dt
        rf = self.produced / (m.rho * self.V0 * self.phi_bar)
        self.rows.append(dg.StepDiagnostics(
            step=st.n, time=st.t, max_r_mass_rate=float(np.abs(r).max()), max_r_mass_mass=float(np.abs(r).max() * dt),
            RF=rf, kappa_bar=dg.field_average(st.kappa), epsv_bar=dg.field_average(st.eps_v),
            picard_iterations=iterations, outflow_rate=q, max_facet_flux=float(np.abs(fluxes).max())))
        if self.keep:
            self.residuals.append(r)
        for tw in self.wanted:
            if abs(st.t - tw) <= 1e-9 * max(1.0, abs(tw)):
                self.snapshots[tw] = st.snapshot()


def _initial_state(pb: Problem, ops, update_kappa):
    u0, p0, eps0, kappa0 = initial_equilibrium(pb, ops, update_kappa)
    return SimState(u_prev=u0.copy(), p_prev=p0.copy(), u_curr=u0, p_curr=p0, eps_v=eps0, kappa=kappa0,
                    kappa_solve=kappa0.copy())


def run_pressure_independent(pb: Problem, keep_residuals=False, callback: Optional[Callable] = None) -> RunResult:
    """One block solve per step with the mobility frozen at its initial value."""
    ops = _Operators(pb)
    st = _initial_state(pb, ops, update_kappa=False)
    init = st.snapshot()
    rec = _Recorder(pb, keep_residuals)
    kappa = st.kappa
    cache = FactorCache()
    for dt in pb.time.steps:
        st.t += dt
        st.n += 1
        w = solve_linear_block(_step_system(pb, ops, kappa, dt, st.t, st.u_prev, st.p_prev), cache)
        st.u_curr, st.p_curr = _split(pb, w)
        _, st.eps_v = volumetric_strain(pb.u_space, st.u_curr)
        st.kappa_solve = kappa
        st.iota, st.zeta = 1, 0.0
        st.iteration_counts.append(1)
        rec.record(st, dt, 1)
        if callback is not None:
            callback(st)
        st.u_prev, st.p_prev = st.u_curr.copy(), st.p_curr.copy()
    return RunResult(rec.rows, rec.snapshots, init, st, rec.residuals)


def _kappa_of(pb: Problem, u):
    m = pb.materials
    _, eps = volumetric_strain(pb.u_space, u)
    _, kappa = update_permeability(m.k_m0, eps, m.phi, m.rho, m.mu, m.kappa_r)
    return eps, kappa


def run_pressure_dependent(pb: Problem, keep_residuals=False, callback: Optional[Callable] = None) -> RunResult:
    """Picard iteration on the strain-dependent mobility at every step.

    Each step starts with a predictor solve using the previous step's
    mobility; its strain gives the iteration-zero mobility.  The loop then
    re-solves with the latest mobility until the L2 increment drops to
    ``xi``.
    """
    ops = _Operators(pb)
    st = _initial_state(pb, ops, update_kappa=True)
    init = st.snapshot()
    rec = _Recorder(pb, keep_residuals)
    for dt in pb.time.steps:
        st.t += dt
        st.n += 1
        w_old = solve_linear_block(_step_system(pb, ops, st.kappa, dt, st.t, st.u_prev, st.p_prev))
        eps, kappa = _kappa_of(pb, _split(pb, w_old)[0])
        history = []
        iota = 0
        while True:
            iota += 1
            w = solve_linear_block(_step_system(pb, ops, kappa, dt, st.t, st.u_prev, st.p_prev))
            kappa_used = kappa
            eps, kappa = _kappa_of(pb, _split(pb, w)[0])
            zeta = picard_increment_norm(w, w_old, ops.M_u, ops.M_p, pb.relative, pb.zeta_unit)
            history.append(zeta)
            if zeta <= pb.xi:
                break
            if iota >= pb.max_iter:
                raise SolverError(f"Picard iteration did not converge in {pb.max_iter} iterations at step {st.n}",
                                  zeta_history=history, step=st.n, t=st.t)
            w_old = w
        st.u_curr, st.p_curr = _split(pb, w)
        st.eps_v, st.kappa, st.kappa_solve = eps, kappa, kappa_used
        st.iota, st.zeta = iota, history[-1]
        st.zeta_history = history
        st.iteration_counts.append(iota)
        log.debug("step %d t=%g picard %d zeta %s", st.n, st.t, iota, history)
        rec.record(st, dt, iota)
        if callback is not None:
            callback(st)
        st.u_prev, st.p_prev = st.u_curr.copy(), st.p_curr.copy()
    return RunResult(rec.rows, rec.snapshots, init, st, rec.residuals)


def run(pb: Problem, **kw) -> RunResult:
    if pb.coupling == "dependent":
        return run_pressure_dependent(pb, **kw)
    return run_pressure_independent(pb, **kw)
