"""Conforming simplicial meshes with facet connectivity.

Triangles in 2D, tetrahedra in 3D.  Every facet knows its one or two
adjacent cells; the adjacent cell with the lower index is the ``+`` side
and ``facet_normals`` holds the unit normal pointing out of it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

INTERIOR, DIRICHLET, NEUMANN = 0, 1, 2


class MeshError(ValueError):
    pass


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _simplex_volumes(points):
    """Signed measures of simplices given as (n, d+1, d) vertex arrays."""
    d = points.shape[-1]
    jac = points[:, 1:, :] - points[:, :1, :]
    return np.linalg.det(jac) / float(np.prod(np.arange(1, d + 1)))


def _facet_measures(points):
    """Unsigned measures of (d-1)-simplices embedded in R^d, points (n, d, d)."""
    d = points.shape[-1]
    if d == 2:
        return np.linalg.norm(points[:, 1] - points[:, 0], axis=1)
    if d == 3:
        c = np.cross(points[:, 1] - points[:, 0], points[:, 2] - points[:, 0])
        return 0.5 * np.linalg.norm(c, axis=1)
    raise MeshError(f"unsupported dimension {d}")


def _facet_normals(points, opposite):
    """Unit normals of facets, oriented away from the opposite vertex."""
    d = points.shape[-1]
    if d == 2:
        t = points[:, 1] - points[:, 0]
        n = np.stack([t[:, 1], -t[:, 0]], axis=1)
    else:
        n = np.cross(points[:, 1] - points[:, 0], points[:, 2] - points[:, 0])
    n /= np.linalg.norm(n, axis=1)[:, None]
    flip = np.einsum("ij,ij->i", n, opposite - points[:, 0]) > 0
    n[flip] *= -1.0
    return n


class Mesh:
    """Immutable simplicial mesh.

    Parameters
    ----------
    vertices : (n_vertices, d) array
    cells : (n_cells, d+1) integer array of vertex indices
    boundary_tags : optional mapping boundary facet index -> label.  When
        omitted, ``tag_boundary`` can be used to attach labels from
        geometric predicates.
    """

    def __init__(self, vertices, cells, boundary_tags: Optional[Mapping[int, str]] = None):
        vertices = np.asarray(vertices, dtype=float)
        cells = np.asarray(cells, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise MeshError("vertices must be an (n, 2) or (n, 3) array")
        d = vertices.shape[1]
        if cells.ndim != 2 or cells.shape[1] != d + 1:
            raise MeshError(f"cells must be an (m, {d + 1}) array")
        if len(cells) == 0:
            raise MeshError("mesh has no cells")
        if cells.min() < 0 or cells.max() >= len(vertices):
            raise MeshError("cell connectivity references unknown vertices")

        cells = cells.copy()
        vol = _simplex_volumes(vertices[cells])
        neg = vol < 0
        # swap the last two vertices to restore positive orientation
        cells[neg, -2], cells[neg, -1] = cells[neg, -1].copy(), cells[neg, -2].copy()
        vol = np.abs(vol)
        if np.any(vol <= 0):
            raise MeshError("degenerate cell with zero volume")

        self.dim = d
        self.vertices = _readonly(vertices)
        self.cells = _readonly(cells)
        self.cell_volumes = _readonly(vol)
        self._build_facets()
        self.boundary_tags: Dict[int, str] = dict(boundary_tags or {})

    # -- topology ---------------------------------------------------------
    def _build_facets(self):
        d = self.dim
        nc = len(self.cells)
        # local facet i is opposite local vertex i
        local = np.array([[j for j in range(d + 1) if j != i] for i in range(d + 1)])
        all_f = self.cells[:, local]                       # (nc, d+1, d)
        keys = np.sort(all_f.reshape(-1, d), axis=1)
        uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            raise MeshError("non-manifold mesh: facet shared by more than two cells")
        nf = len(uniq)
        cell_of = np.repeat(np.arange(nc), d + 1)
        loc_of = np.tile(np.arange(d + 1), nc)

        facet_cells = -np.ones((nf, 2), dtype=np.int64)
        facet_local = -np.ones((nf, 2), dtype=np.int64)
        # occurrences are visited in increasing cell order, so slot 0 gets the lower index
        order = np.argsort(inverse, kind="stable")
        f_sorted = inverse[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = f_sorted[1:] != f_sorted[:-1]
        facet_cells[f_sorted[first], 0] = cell_of[order[first]]
        facet_local[f_sorted[first], 0] = loc_of[order[first]]
        second = ~first
        facet_cells[f_sorted[second], 1] = cell_of[order[second]]
        facet_local[f_sorted[second], 1] = loc_of[order[second]]

        c0, l0 = facet_cells[:, 0], facet_local[:, 0]
        facets = all_f[c0, l0]                             # vertex order as seen from T+
        pts = self.vertices[facets]
        opposite = self.vertices[self.cells[c0, l0]]

        self.facets = _readonly(facets)
        self.facet_cells = _readonly(facet_cells)
        self.facet_local = _readonly(facet_local)
        self.cell_facets = _readonly(inverse.reshape(nc, d + 1))
        self.facet_areas = _readonly(_facet_measures(pts))
        self.facet_normals = _readonly(_facet_normals(pts, opposite))
        self.facet_centroids = _readonly(pts.mean(axis=1))
        self.boundary_facets = _readonly(np.flatnonzero(facet_cells[:, 1] < 0))
        self.interior_facets = _readonly(np.flatnonzero(facet_cells[:, 1] >= 0))

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def cell_centroids(self):
        return self.vertices[self.cells].mean(axis=1)

    def cell_diameters(self):
        pts = self.vertices[self.cells]
        diam = np.zeros(self.n_cells)
        for i, j in itertools.combinations(range(self.dim + 1), 2):
            diam = np.maximum(diam, np.linalg.norm(pts[:, i] - pts[:, j], axis=1))
        return diam

    def cell_facet_normals(self, cell):
        """Outward unit normals of the facets of ``cell``, in local facet order."""
        f = self.cell_facets[cell]
        sign = np.where(self.facet_cells[f, 0] == cell, 1.0, -1.0)
        return self.facet_normals[f] * sign[:, None]

    def edges(self):
        """Unique sorted vertex pairs and the (n_cells, n_local_edges) edge map."""
        pairs = list(itertools.combinations(range(self.dim + 1), 2))
        e = self.cells[:, np.array(pairs)].reshape(-1, 2)
        e = np.sort(e, axis=1)
        uniq, inverse = np.unique(e, axis=0, return_inverse=True)
        return uniq, inverse.reshape(self.n_cells, len(pairs))

    def extent(self) -> float:
        return float(np.max(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def scaled(self, s: float) -> "Mesh":
        return Mesh(self.vertices * s, self.cells, self.boundary_tags)

    def tag_boundary(self, regions: Mapping[str, Callable], tol: Optional[float] = None) -> "Mesh":
        """Attach labels to boundary facets from centroid predicates.

        Each predicate receives (n, d) centroids and a tolerance and returns
        a boolean mask.  A facet matched by no region keeps any previous tag.
        """
        tol = 1e-10 * self.extent() if tol is None else tol
        tags = dict(self.boundary_tags)
        cent = self.facet_centroids[self.boundary_facets]
        for label, pred in regions.items():
            mask = np.asarray(pred(cent, tol), dtype=bool)
            for f in self.boundary_facets[mask]:
                tags[int(f)] = label
        self.boundary_tags = tags
        return self


# -- generation -------------------------------------------------------------

_AXIS_NAMES = {
    2: (("left", "right"), ("bottom", "top")),
    3: (("left", "right"), ("front", "back"), ("bottom", "top")),
}


def box_regions(extents, dim):
    """Predicates selecting each face of an axis-aligned box."""
    regions = {}
    for ax in range(dim):
        lo, hi = extents[ax]
        for name, val in zip(_AXIS_NAMES[dim][ax], (lo, hi)):
            regions[name] = (lambda c, tol, ax=ax, val=val: np.abs(c[:, ax] - val) <= tol)
    return regions


def generate_box_mesh(extents: Sequence[Sequence[float]], divisions: Sequence[int], dim: int = 2) -> Mesh:
    """Structured simplicial mesh of an axis-aligned box.

    Each grid square is split along its lower-left to upper-right diagonal;
    each grid cube is split into the six tetrahedra of the Kuhn
    triangulation.  Boundary facets are tagged ``left/right/bottom/top``
    (2D) or ``left/right/front/back/bottom/top`` (3D, ``z`` is vertical).
    """
    if dim not in (2, 3):
        raise MeshError("dim must be 2 or 3")
    extents = [tuple(map(float, e)) for e in extents]
    divisions = [int(n) for n in divisions]
    if len(extents) != dim or len(divisions) != dim:
        raise MeshError("extents and divisions must have one entry per axis")
    for lo, hi in extents:
        if not hi > lo:
            raise MeshError(f"inverted or degenerate extent ({lo}, {hi})")
    if any(n < 1 for n in divisions):
        raise MeshError("division counts must be >= 1")

    axes = [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(extents, divisions)]
    grid = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.ravel(order="F") for g in grid], axis=1)
    shape = [n + 1 for n in divisions]

    def vid(*idx):
        out = idx[0]
        stride = 1
        for k in range(1, dim):
            stride *= shape[k - 1]
            out = out + stride * idx[k]
        return out

    if dim == 2:
        i, j = np.meshgrid(np.arange(divisions[0]), np.arange(divisions[1]), indexing="ij")
        i, j = i.ravel(order="F"), j.ravel(order="F")
        v00, v10, v01, v11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
        cells = np.stack([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)], axis=1).reshape(-1, 3)
    else:
        i, j, k = np.meshgrid(*[np.arange(n) for n in divisions], indexing="ij")
        i, j, k = (a.ravel(order="F") for a in (i, j, k))
        tets = []
        for perm in itertools.permutations(range(3)):
            off = np.zeros(3, dtype=int)
            path = [off.copy()]
            for ax in perm:
                off[ax] += 1
                path.append(off.copy())
            tets.append(np.stack([vid(i + p[0], j + p[1], k + p[2]) for p in path], axis=1))
        cells = np.stack(tets, axis=1).reshape(-1, 4)

    mesh = Mesh(vertices, cells)
    mesh.tag_boundary(box_regions(extents, dim))
    mesh.box_extents = tuple(extents)
    return mesh


def unit_square(n: int) -> Mesh:
    return generate_box_mesh([(0, 1), (0, 1)], [n, n], 2)


def unit_cube(n: int) -> Mesh:
    return generate_box_mesh([(0, 1)] * 3, [n, n, n], 3)


# -- geometry queries ---------------------------------------------------------

def characteristic_length(mesh: Mesh, facet=None):
    """Facet length scale for the interior penalty.

    ``(|T+| + |T-|) / (2 |e|)`` on interior facets and ``|T| / |e|`` on
    boundary facets.  Accepts a single index, an index array, or ``None``
    for all facets.
    """
    idx = np.arange(mesh.n_facets) if facet is None else np.asarray(facet)
    fc = mesh.facet_cells[idx]
    v0 = mesh.cell_volumes[fc[..., 0]]
    inner = fc[..., 1] >= 0
    v1 = np.where(inner, mesh.cell_volumes[np.where(inner, fc[..., 1], 0)], 0.0)
    he = np.where(inner, (v0 + v1) / (2.0 * mesh.facet_areas[idx]), v0 / mesh.facet_areas[idx])
    return float(he) if np.ndim(he) == 0 else he


def mesh_size(mesh: Mesh) -> float:
    """Largest cell diameter."""
    if mesh.n_cells == 0:
        raise MeshError("empty mesh")
    return float(mesh.cell_diameters().max())


# -- boundary conditions -------------------------------------------------------

@dataclass
class MechanicalBC:
    """``kind`` is 'displacement' or 'traction'.

    For displacement conditions ``components`` restricts which components
    are prescribed (a roller fixes only the normal one); the free
    components carry zero traction.
    """
    kind: str
    value: object = 0.0
    components: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.kind not in ("displacement", "traction"):
            raise MeshError(f"unknown mechanical condition {self.kind!r}")


@dataclass
class FlowBC:
    """``kind`` is 'pressure' (p_D) or 'flux' (q_D, outward normal mass flux)."""
    kind: str
    value: object = 0.0

    def __post_init__(self):
        if self.kind not in ("pressure", "flux"):
            raise MeshError(f"unknown flow condition {self.kind!r}")


@dataclass
class BoundarySpec:
    mechanical: Dict[str, MechanicalBC] = field(default_factory=dict)
    flow: Dict[str, FlowBC] = field(default_factory=dict)
    regions: Dict[str, Callable] = field(default_factory=dict)


@dataclass
class FacetClassification:
    """Per-facet labels and kinds (INTERIOR / DIRICHLET / NEUMANN) per field."""
    labels: np.ndarray
    mech: np.ndarray
    flow: np.ndarray

    def facets(self, field_name: str, kind: int):
        return np.flatnonzero(getattr(self, field_name) == kind)

    def labelled(self, label: str):
        return np.flatnonzero(self.labels == label)


def classify_facets(mesh: Mesh, spec: BoundarySpec) -> FacetClassification:
    """Split the facets into interior, Dirichlet and Neumann sets per field."""
    labels = np.full(mesh.n_facets, "", dtype=object)
    bf = mesh.boundary_facets
    for f in bf:
        labels[f] = mesh.boundary_tags.get(int(f), "")
    if spec.regions:
        tol = 1e-10 * mesh.extent()
        cent = mesh.facet_centroids[bf]
        hits = np.zeros(len(bf), dtype=int)
        for label, pred in spec.regions.items():
            m = np.asarray(pred(cent, tol), dtype=bool)
            hits += m
            labels[bf[m]] = label
        if np.any(hits > 1):
            c = cent[np.flatnonzero(hits > 1)[0]]
            raise MeshError(f"boundary facet at {c.tolist()} matches more than one region")

    mech = np.full(mesh.n_facets, INTERIOR, dtype=np.int8)
    flow = np.full(mesh.n_facets, INTERIOR, dtype=np.int8)
    for f in bf:
        lab = labels[f]
        if lab not in spec.mechanical or lab not in spec.flow:
            c = mesh.facet_centroids[f]
            raise MeshError(
                f"boundary facet {int(f)} at centroid {c.tolist()} (label {lab!r}) "
                "lacks a mechanical or flow condition")
        mech[f] = DIRICHLET if spec.mechanical[lab].kind == "displacement" else NEUMANN
        flow[f] = DIRICHLET if spec.flow[lab].kind == "pressure" else NEUMANN
    return FacetClassification(labels=labels, mech=mech, flow=flow)


# -- plain-text import/export ---------------------------------------------------

def write_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"dim {mesh.dim}\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        fh.write(f"cells {mesh.n_cells}\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(x)) for x in v) + "\n")
        for c in mesh.cells:
            fh.write(" ".join(str(int(i)) for i in c) + "\n")


def read_mesh(path) -> Mesh:
    """Read the plain-text format written by :func:`write_mesh`."""
    with open(path) as fh:
        tokens = fh.read().split()
    try:
        if tokens[0] != "dim" or tokens[2] != "vertices" or tokens[4] != "cells":
            raise MeshError("expected header lines 'dim', 'vertices N', 'cells M'")
        d, nv, nc = int(tokens[1]), int(tokens[3]), int(tokens[5])
        body = tokens[6:]
        coords = np.array(body[: nv * d], dtype=float).reshape(nv, d)
        conn = np.array(body[nv * d: nv * d + nc * (d + 1)], dtype=np.int64).reshape(nc, d + 1)
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    return Mesh(coords, conn)
