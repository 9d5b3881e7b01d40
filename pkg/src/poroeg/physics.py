"""Constitutive relations and per-cell material data."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

from .quadrature import simplex_rule
from .spaces import eval_at_reference

KAPPA_R = 1e-16


class MaterialError(ValueError):
    pass


def biot_coefficient(K, K_s):
    """alpha = 1 - K/K_s; ``K_s = inf`` gives alpha = 1."""
    K = np.asarray(K, dtype=float)
    K_s = np.asarray(K_s, dtype=float)
    if np.any(K_s <= 0):
        raise MaterialError("K_s must be positive")
    if np.any(K < 0) or np.any(K > K_s):
        raise MaterialError("need 0 <= K <= K_s")
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(np.isinf(K_s), 1.0, 1.0 - K / K_s)
    return float(alpha) if alpha.ndim == 0 else alpha


def solid_modulus(K, alpha):
    """Invert alpha = 1 - K/K_s; alpha = 1 gives K_s = inf."""
    K = np.asarray(K, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    with np.errstate(divide="ignore"):
        Ks = np.where(alpha >= 1.0, np.inf, K / (1.0 - alpha))
    return float(Ks) if Ks.ndim == 0 else Ks


def lame_parameters(K, nu):
    """Lame constants (lambda_l, mu_l) from bulk modulus and Poisson ratio."""
    K = np.asarray(K, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if np.any(nu <= 0) or np.any(nu >= 0.5):
        raise MaterialError("Poisson ratio must lie in (0, 0.5)")
    if np.any(K <= 0):
        raise MaterialError("bulk modulus must be positive")
    lam = 3.0 * K * nu / (1.0 + nu)
    mu = 3.0 * K * (1.0 - 2.0 * nu) / (2.0 * (1.0 + nu))
    if lam.ndim == 0:
        return float(lam), float(mu)
    return lam, mu


def permeability_factor(eps_v, phi):
    """Strain multiplier (1 + eps_v/phi)^3 / (1 + eps_v)."""
    eps_v = np.asarray(eps_v, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0):
        raise MaterialError("porosity must be positive")
    if np.any(1.0 + eps_v <= 0):
        raise MaterialError("non-physical compaction: 1 + eps_v <= 0")
    return (1.0 + eps_v / phi) ** 3 / (1.0 + eps_v)


def update_permeability(k_m0, eps_v, phi, rho=1000.0, mu=1e-3, kappa_r=KAPPA_R):
    """Strain-altered permeability and mobility.

    Returns ``(k_m, kappa)`` with ``kappa = rho k_m / mu`` floored at
    ``kappa_r``; ``k_m`` is reported consistently with the floored
    mobility, which also guards the negative factors of eps_v < -phi.
    """
    raw = np.asarray(k_m0, dtype=float) * permeability_factor(eps_v, phi)
    kappa = np.maximum(rho * raw / mu, kappa_r)
    return kappa * mu / rho, kappa


def volumetric_strain(u_space, u, degree=2):
    """Divergence of a vector field per cell.

    Returns ``(qp_values, cell_average)``; quadrature-point values have shape
    (n_cells, nq) on the reference rule of the given degree.
    """
    rule = simplex_rule(u_space.mesh.dim, degree)
    _, grad = eval_at_reference(u_space, u, rule.points)
    div = np.trace(grad, axis1=-2, axis2=-1)
    avg = div @ rule.weights / rule.weights.sum()
    return div, avg


@dataclass
class MaterialField:
    """Per-cell poroelastic properties (SI units) with isotropic permeability."""
    K: np.ndarray
    nu: np.ndarray
    K_s: np.ndarray
    alpha: np.ndarray
    phi: np.ndarray
    c_f: np.ndarray
    lam: np.ndarray
    mu_l: np.ndarray
    k_m0: np.ndarray
    k_m: np.ndarray
    kappa: np.ndarray
    rho: float = 1000.0
    mu: float = 1e-3
    kappa_r: float = KAPPA_R
    gravity: Optional[np.ndarray] = None
    source: object = 0.0

    @classmethod
    def build(cls, n_cells, K, nu, phi, c_f, k_m0, rho=1000.0, mu=1e-3, alpha=None, K_s=None,
              kappa_r=KAPPA_R, gravity=None, source=0.0):
        """Broadcast scalar or per-cell inputs; give either ``alpha`` or ``K_s``."""
        def cellwise(x):
            return np.broadcast_to(np.asarray(x, dtype=float), (n_cells,)).copy()

        K, nu, phi, c_f, k_m0 = map(cellwise, (K, nu, phi, c_f, k_m0))
        if (alpha is None) == (K_s is None):
            raise MaterialError("give exactly one of alpha and K_s")
        if alpha is None:
            K_s = cellwise(K_s)
            alpha = cellwise(biot_coefficient(K, K_s))
        else:
            alpha = cellwise(alpha)
            K_s = cellwise(solid_modulus(K, alpha))
        lam, mu_l = lame_parameters(K, nu)
        if np.any(alpha < 0) or np.any(alpha > 1):
            raise MaterialError("Biot coefficient must lie in [0, 1]")
        if np.any(phi <= 0) or np.any(phi >= 1):
            raise MaterialError("porosity must lie in (0, 1)")
        if np.any(c_f < 0):
            raise MaterialError("fluid compressibility must be non-negative")
        if np.any(k_m0 <= 0):
            raise MaterialError("initial permeability must be positive")
        if rho <= 0 or mu <= 0:
            raise MaterialError("density and viscosity must be positive")
        kappa = np.maximum(rho * k_m0 / mu, kappa_r)
        g = None if gravity is None else np.asarray(gravity, dtype=float)
        return cls(K=K, nu=nu, K_s=K_s, alpha=alpha, phi=phi, c_f=c_f, lam=np.asarray(lam),
                   mu_l=np.asarray(mu_l), k_m0=k_m0, k_m=k_m0.copy(), kappa=kappa, rho=float(rho),
                   mu=float(mu), kappa_r=float(kappa_r), gravity=g, source=source)

    @property
    def n_cells(self):
        return len(self.K)

    def storage(self):
        """rho (phi c_f + (alpha - phi)/K_s), the inverse Biot modulus times rho."""
        with np.errstate(divide="ignore"):
            inv_ks = np.where(np.isinf(self.K_s), 0.0, 1.0 / self.K_s)
        return self.rho * (self.phi * self.c_f + (self.alpha - self.phi) * inv_ks)

    def kappa0(self):
        return np.maximum(self.rho * self.k_m0 / self.mu, self.kappa_r)

    def with_strain(self, eps_v):
        """Copy with k_m and kappa updated from per-cell volumetric strain."""
        k_m, kappa = update_permeability(self.k_m0, eps_v, self.phi, self.rho, self.mu, self.kappa_r)
        return replace(self, k_m=k_m, kappa=kappa)

    def with_kappa(self, kappa):
        kappa = np.asarray(kappa, dtype=float)
        return replace(self, kappa=kappa, k_m=kappa * self.mu / self.rho)

    def kappa_tensor(self):
        d = 3 if self.gravity is None else len(self.gravity)
        return self.kappa[:, None, None] * np.eye(d)


# -- random fields ---------------------------------------------------------------

@dataclass(frozen=True)
class RandomFieldSpec:
    """Uncorrelated per-cell field; mean/variance are those of the field itself."""
    distribution: str
    mean: float
    variance: float
    min: float
    max: float
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in ("normal", "lognormal"):
            raise MaterialError(f"unknown distribution {self.distribution!r}")
        if not self.min < self.max:
            raise MaterialError("random field needs min < max")
        if self.variance < 0:
            raise MaterialError("variance must be non-negative")
        if self.distribution == "lognormal" and self.mean <= 0:
            raise MaterialError("log-normal mean must be positive")


PHI_STREAM, KAPPA_STREAM = 1, 2


def _standard_normals(seed, stream, n):
    # counter-based: draw i depends only on (seed, stream, i)
    bits = Philox(key=np.array([seed & (2**64 - 1), stream], dtype=np.uint64)).random_raw(n)
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def sample_field(spec: RandomFieldSpec, n, stream=0):
    z = _standard_normals(spec.seed, stream, n)
    if spec.distribution == "normal":
        vals = spec.mean + np.sqrt(spec.variance) * z
    else:
        s2 = np.log1p(spec.variance / spec.mean**2)
        vals = np.exp(np.log(spec.mean) - 0.5 * s2 + np.sqrt(s2) * z)
    return np.clip(vals, spec.min, spec.max)


def sample_random_fields(mesh, phi_spec: RandomFieldSpec, kappa_spec: RandomFieldSpec):
    """Independent per-cell porosity and initial mobility fields."""
    n = mesh.n_cells if hasattr(mesh, "n_cells") else int(mesh)
    return sample_field(phi_spec, n, PHI_STREAM), sample_field(kappa_spec, n, KAPPA_STREAM)


def write_fields_csv(path, phi, kappa0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_index", "phi", "kappa0"])
        for i, (a, b) in enumerate(zip(phi, kappa0)):
            w.writerow([i, repr(float(a)), repr(float(b))])


def read_fields_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    idx = np.array([int(r["cell_index"]) for r in rows])
    if not np.array_equal(np.sort(idx), np.arange(len(idx))):
        raise MaterialError(f"{path}: cell indices must cover 0..n-1 exactly once")
    phi = np.empty(len(rows))
    kappa0 = np.empty(len(rows))
    phi[idx] = [float(r["phi"]) for r in rows]
    kappa0[idx] = [float(r["kappa0"]) for r in rows]
    return phi, kappa0
