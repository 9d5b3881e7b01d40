"""Lagrange function spaces on simplices: CG_k, DG_k (scalar or vector) and EG_k.

An EG_k space is CG_k plus one constant per cell.  It is represented
exactly like a DG space whose local basis is the P_k Lagrange basis
followed by the constant function, with the CG part of the dof map shared
between cells.  Global ordering: all CG dofs first, then the cell constants.
"""
from __future__ import annotations

import itertools
from functools import lru_cache
from math import comb

import numpy as np

from .mesh import Mesh


class SpaceError(ValueError):
    pass


# -- reference basis -----------------------------------------------------------

def _barycentric(ref):
    ref = np.asarray(ref, dtype=float)
    lam0 = 1.0 - ref.sum(axis=-1, keepdims=True)
    return np.concatenate([lam0, ref], axis=-1)


@lru_cache(maxsize=None)
def _bary_grads(dim):
    g = np.zeros((dim + 1, dim))
    g[0, :] = -1.0
    g[1:, :] = np.eye(dim)
    return g


@lru_cache(maxsize=None)
def local_edges(dim):
    return tuple(itertools.combinations(range(dim + 1), 2))


def lagrange_basis(dim: int, degree: int, ref):
    """Values (..., n) and reference gradients (..., n, dim) of the P_k basis.

    Node order: vertices, then edge midpoints in ``local_edges`` order.
    """
    lam = _barycentric(ref)
    dl = _bary_grads(dim)
    shape = lam.shape[:-1]
    if degree == 0:
        return np.ones(shape + (1,)), np.zeros(shape + (1, dim))
    if degree == 1:
        grads = np.broadcast_to(dl, shape + dl.shape).copy()
        return lam, grads
    if degree == 2:
        edges = local_edges(dim)
        nv = dim + 1
        vals = np.empty(shape + (nv + len(edges),))
        grads = np.empty(shape + (nv + len(edges), dim))
        for i in range(nv):
            vals[..., i] = lam[..., i] * (2.0 * lam[..., i] - 1.0)
            grads[..., i, :] = (4.0 * lam[..., i] - 1.0)[..., None] * dl[i]
        for k, (i, j) in enumerate(edges):
            vals[..., nv + k] = 4.0 * lam[..., i] * lam[..., j]
            grads[..., nv + k, :] = 4.0 * (lam[..., j][..., None] * dl[i] + lam[..., i][..., None] * dl[j])
        return vals, grads
    raise SpaceError(f"unsupported polynomial degree {degree}")


def lagrange_nodes(dim: int, degree: int):
    """Reference coordinates of the local Lagrange nodes."""
    verts = np.vstack([np.zeros(dim), np.eye(dim)])
    if degree == 0:
        return verts.mean(axis=0, keepdims=True)
    if degree == 1:
        return verts
    mids = np.array([(verts[i] + verts[j]) / 2 for i, j in local_edges(dim)])
    return np.vstack([verts, mids])


def local_size(dim: int, degree: int) -> int:
    return comb(degree + dim, dim)


# -- geometry ---------------------------------------------------------------------

class CellGeometry:
    """Affine maps x = v0 + J xi for every cell."""

    def __init__(self, mesh: Mesh):
        pts = mesh.vertices[mesh.cells]
        self.origin = pts[:, 0, :]
        self.jac = np.transpose(pts[:, 1:, :] - pts[:, :1, :], (0, 2, 1))  # columns v_i - v0
        self.inv_jac = np.linalg.inv(self.jac)
        self.det = np.linalg.det(self.jac)

    def to_physical(self, ref, cells=None):
        """ref (nq, d) shared by all cells, or (nc, nq, d) per cell."""
        o = self.origin if cells is None else self.origin[cells]
        J = self.jac if cells is None else self.jac[cells]
        if ref.ndim == 2:
            return o[:, None, :] + np.einsum("cij,qj->cqi", J, ref)
        return o[:, None, :] + np.einsum("cij,cqj->cqi", J, ref)

    def to_reference(self, x, cells):
        """x (n, nq, d) physical points in the given cells."""
        return np.einsum("cij,cqj->cqi", self.inv_jac[cells], x - self.origin[cells][:, None, :])

    def physical_grads(self, ref_grads, cells=None):
        """Map reference gradients (..., n, d) to physical ones per cell."""
        inv = self.inv_jac if cells is None else self.inv_jac[cells]
        if ref_grads.ndim == 3:   # (nq, n, d) shared
            return np.einsum("cji,qaj->cqai", inv, ref_grads)
        return np.einsum("cji,cqaj->cqai", inv, ref_grads)


def geometry(mesh: Mesh) -> CellGeometry:
    geo = getattr(mesh, "_geometry", None)
    if geo is None:
        geo = CellGeometry(mesh)
        mesh._geometry = geo
    return geo


# -- spaces -----------------------------------------------------------------------

class FnSpace:
    """Lagrange space on a mesh.

    ``cell_nodes`` maps each cell to the global indices of its local scalar
    nodes; for vector spaces the dof of component ``c`` at node ``i`` is
    ``i * value_dim + c``.
    """

    def __init__(self, mesh: Mesh, kind: str, degree: int, value_dim: int = 1):
        self.mesh = mesh
        self.kind = kind
        self.degree = degree
        self.value_dim = value_dim
        d = mesh.dim
        self.n_local_nodes = local_size(d, degree)
        self.dirichlet_dofs = np.zeros(0, dtype=np.int64)
        self.dirichlet_values = np.zeros(0)
        if kind == "DG":
            nc = mesh.n_cells
            self.cell_nodes = np.arange(nc * self.n_local_nodes).reshape(nc, self.n_local_nodes)
            ref = lagrange_nodes(d, degree)
            self.node_coords = geometry(mesh).to_physical(ref).reshape(-1, d)
        elif kind == "CG":
            if degree == 1:
                self.cell_nodes = mesh.cells.copy()
                self.node_coords = mesh.vertices.copy()
            elif degree == 2:
                edges, cell_edges = mesh.edges()
                self.cell_nodes = np.hstack([mesh.cells, mesh.n_vertices + cell_edges])
                mids = mesh.vertices[edges].mean(axis=1)
                self.node_coords = np.vstack([mesh.vertices, mids])
            else:
                raise SpaceError(f"CG degree {degree} unsupported")
        else:
            raise SpaceError(f"unknown space kind {kind!r}")
        self.n_nodes = len(self.node_coords)

    @property
    def n_dofs(self) -> int:
        return self.n_nodes * self.value_dim

    @property
    def n_local(self) -> int:
        return self.cell_nodes.shape[1] * self.value_dim

    @property
    def cell_dofs(self):
        """(n_cells, n_local) global dof indices."""
        vd = self.value_dim
        if vd == 1:
            return self.cell_nodes
        return (self.cell_nodes[:, :, None] * vd + np.arange(vd)).reshape(len(self.cell_nodes), -1)

    def basis(self, ref):
        """Scalar local basis values (..., n) and reference gradients (..., n, d)."""
        return lagrange_basis(self.mesh.dim, self.degree, ref)

    def facet_nodes(self, facets):
        """Global scalar nodes lying on the given facets (unique, sorted)."""
        d = self.mesh.dim
        cells = self.mesh.facet_cells[facets, 0]
        loc = self.mesh.facet_local[facets, 0]
        on = _facet_local_nodes(d, self.degree)
        nodes = self.cell_nodes[cells[:, None], on[loc]]
        return np.unique(nodes)

    def __repr__(self):
        vd = "" if self.value_dim == 1 else f"^{self.value_dim}"
        return f"{self.kind}{self.degree}{vd}(n_dofs={self.n_dofs})"


class EgFnSpace(FnSpace):
    """CG_k + DG_0."""

    def __init__(self, mesh: Mesh, degree: int):
        self.mesh = mesh
        self.kind = "EG"
        self.degree = degree
        self.value_dim = 1
        self.cg_part = FnSpace(mesh, "CG", degree)
        self.const_part = FnSpace(mesh, "DG", 0)
        nc = mesh.n_cells
        self.n_cg = self.cg_part.n_dofs
        self.cell_nodes = np.hstack([self.cg_part.cell_nodes, self.n_cg + np.arange(nc)[:, None]])
        self.node_coords = np.vstack([self.cg_part.node_coords, mesh.cell_centroids])
        self.n_local_nodes = self.cell_nodes.shape[1]
        self.n_nodes = self.n_cg + nc
        self.dirichlet_dofs = np.zeros(0, dtype=np.int64)
        self.dirichlet_values = np.zeros(0)

    def basis(self, ref):
        v, g = lagrange_basis(self.mesh.dim, self.degree, ref)
        one = np.ones(v.shape[:-1] + (1,))
        return np.concatenate([v, one], axis=-1), np.concatenate([g, np.zeros(g.shape[:-2] + (1, g.shape[-1]))], axis=-2)

    def facet_nodes(self, facets):
        return self.cg_part.facet_nodes(facets)


@lru_cache(maxsize=None)
def _facet_local_nodes(dim, degree):
    """Row i: local nodes lying on the facet opposite local vertex i."""
    rows = []
    for i in range(dim + 1):
        r = [v for v in range(dim + 1) if v != i]
        if degree == 2:
            r += [dim + 1 + k for k, e in enumerate(local_edges(dim)) if i not in e]
        rows.append(r)
    return np.array(rows)


def build_space(mesh: Mesh, kind: str, degree: int, value_dim: int = 1) -> FnSpace:
    """Construct a CG, DG or EG space of the given degree."""
    kind = kind.upper()
    if kind == "EG":
        if value_dim != 1:
            raise SpaceError("EG spaces are scalar only")
        if degree not in (1, 2):
            raise SpaceError("EG degree must be 1 or 2")
        return EgFnSpace(mesh, degree)
    if kind == "CG" and degree not in (1, 2):
        raise SpaceError("CG degree must be 1 or 2")
    if kind == "DG" and degree not in (0, 1, 2):
        raise SpaceError("DG degree must be 0, 1 or 2")
    if kind not in ("CG", "DG"):
        raise SpaceError(f"unknown space kind {kind!r}")
    if value_dim not in (1, mesh.dim):
        raise SpaceError("value_dim must be 1 or the mesh dimension")
    return FnSpace(mesh, kind, degree, value_dim)


def eval_basis(space: FnSpace, cell: int, ref_points):
    """Local basis values (npts, n) and reference gradients (npts, n, d) at ``ref_points``.

    Raises SpaceError for points outside the reference simplex.
    """
    ref = np.atleast_2d(np.asarray(ref_points, dtype=float))
    if not 0 <= cell < space.mesh.n_cells:
        raise SpaceError(f"cell {cell} out of range")
    lam = _barycentric(ref)
    if np.any(lam < -1e-12):
        raise SpaceError("point outside the reference simplex")
    return space.basis(ref)


def interpolate(space: FnSpace, f):
    """Nodal interpolant of ``f`` (callable on (n, d) points) as a dof vector.

    For EG the CG part holds the nodal values and the cell constants are zero.
    """
    if isinstance(space, EgFnSpace):
        out = np.zeros(space.n_dofs)
        out[: space.n_cg] = interpolate(space.cg_part, f)
        return out
    vals = np.asarray(f(space.node_coords), dtype=float)
    if space.value_dim == 1:
        return np.broadcast_to(vals, (space.n_nodes,)).astype(float).copy()
    return np.broadcast_to(vals, (space.n_nodes, space.value_dim)).reshape(-1).astype(float).copy()


def eval_at_reference(space: FnSpace, dofs, ref, cells=None):
    """Evaluate a dof vector at reference points.

    ``ref`` is (nq, d) shared by all (selected) cells or (nc, nq, d) per
    cell.  Returns values (nc, nq[, vd]) and physical gradients
    (nc, nq[, vd], d).
    """
    cells = np.arange(space.mesh.n_cells) if cells is None else np.asarray(cells)
    phi, dphi = space.basis(ref)
    geo = geometry(space.mesh)
    gphys = geo.physical_grads(dphi, cells)            # (nc, nq, n, d)
    nodes = space.cell_nodes[cells]
    dofs = np.asarray(dofs)
    vd = space.value_dim
    if vd == 1:
        loc = dofs[nodes]                              # (nc, n)
        if phi.ndim == 2:
            val = np.einsum("qa,ca->cq", phi, loc)
        else:
            val = np.einsum("cqa,ca->cq", phi, loc)
        grad = np.einsum("cqad,ca->cqd", gphys, loc)
        return val, grad
    loc = dofs.reshape(-1, vd)[nodes]                  # (nc, n, vd)
    if phi.ndim == 2:
        val = np.einsum("qa,cak->cqk", phi, loc)
    else:
        val = np.einsum("cqa,cak->cqk", phi, loc)
    grad = np.einsum("cqad,cak->cqkd", gphys, loc)
    return val, grad


def locate_points(mesh: Mesh, points, tol=1e-12):
    """Cell index and reference coordinates of each point (brute force).

    Points on shared facets go to the lowest-index containing cell.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    geo = geometry(mesh)
    cells = np.full(len(points), -1, dtype=np.int64)
    refs = np.zeros_like(points)
    for start in range(0, len(points), 256):
        p = points[start:start + 256]
        xi = np.einsum("cij,pcj->pci", geo.inv_jac, p[:, None, :] - geo.origin[None, :, :])
        lam = _barycentric(xi)
        inside = np.all(lam >= -tol, axis=-1)
        has = inside.any(axis=1)
        first = np.argmax(inside, axis=1)
        idx = np.arange(len(p))
        cells[start:start + 256] = np.where(has, first, -1)
        refs[start:start + 256] = xi[idx, first]
    if np.any(cells < 0):
        raise SpaceError("point outside the mesh")
    return cells, refs


def evaluate(space: FnSpace, dofs, points):
    """Point values of a dof vector at physical points."""
    cells, refs = locate_points(space.mesh, points)
    val, _ = eval_at_reference(space, dofs, refs[:, None, :], cells=cells)
    return val[:, 0]
