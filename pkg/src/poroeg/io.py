"""Field snapshots (legacy VTK), run manifests and array CSV helpers."""
from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from .diagnostics import cell_integrals
from .mesh import Mesh

VTK_TRIANGLE = 5
VTK_TETRA = 10


class OutputError(OSError):
    pass


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_vtk(path, mesh: Mesh, point_data: Optional[Mapping[str, np.ndarray]] = None,
              cell_data: Optional[Mapping[str, np.ndarray]] = None, title="poroeg"):
    """Write an unstructured grid in the legacy ASCII format.

    Arrays of shape (n,) become SCALARS and (n, d) become 3-component
    VECTORS (2D vectors are padded with zeros).  Values are printed with
    17 significant digits so that reading back is exact.
    """
    point_data = dict(point_data or {})
    cell_data = dict(cell_data or {})
    nv, nc = mesh.n_vertices, mesh.n_cells
    pts = np.zeros((nv, 3))
    pts[:, :mesh.dim] = mesh.vertices
    ctype = VTK_TRIANGLE if mesh.dim == 2 else VTK_TETRA
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {nv} double"]
    lines += [" ".join(_fmt(v) for v in p) for p in pts]
    k = mesh.cells.shape[1]
    lines.append(f"CELLS {nc} {nc * (k + 1)}")
    lines += [f"{k} " + " ".join(str(int(v)) for v in c) for c in mesh.cells]
    lines.append(f"CELL_TYPES {nc}")
    lines += [str(ctype)] * nc
    for section, data, n in (("POINT_DATA", point_data, nv), ("CELL_DATA", cell_data, nc)):
        if not data:
            continue
        lines.append(f"{section} {n}")
        for name, arr in data.items():
            lines += _data_block(name, arr, n)
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _data_block(name, arr, n):
    if " " in name:
        raise OutputError(f"array name {name!r} contains whitespace")
    arr = np.asarray(arr, dtype=float)
    if arr.shape[0] != n:
        raise OutputError(f"{name}: expected {n} entries, got {arr.shape[0]}")
    if arr.ndim == 1:
        return [f"SCALARS {name} double 1", "LOOKUP_TABLE default"] + [_fmt(v) for v in arr]
    if arr.ndim == 2 and arr.shape[1] in (2, 3):
        vec = np.zeros((n, 3))
        vec[:, :arr.shape[1]] = arr
        return [f"VECTORS {name} double"] + [" ".join(_fmt(v) for v in row) for row in vec]
    raise OutputError(f"{name}: unsupported array shape {arr.shape}")


def read_vtk(path) -> Dict[str, object]:
    """Parse files written by :func:`write_vtk`.

    Returns a dict with ``points`` (n, 3), ``cells`` (m, k), ``cell_types``,
    ``point_data`` and ``cell_data``.
    """
    tokens = Path(path).read_text().split("\n")
    if not tokens or not tokens[0].startswith("# vtk DataFile"):
        raise OutputError(f"{path}: not a legacy VTK file")
    body = " ".join(tokens[2:]).split()
    pos = 0

    def take(count=1):
        nonlocal pos
        out = body[pos:pos + count]
        if len(out) != count:
            raise OutputError(f"{path}: truncated file")
        pos += count
        return out

    out = {"point_data": {}, "cell_data": {}}
    if take(3) != ["ASCII", "DATASET", "UNSTRUCTURED_GRID"]:
        raise OutputError(f"{path}: only ASCII unstructured grids are supported")
    current = None
    sizes = {}
    while pos < len(body):
        key = take()[0]
        if key == "POINTS":
            n = int(take(2)[0])
            out["points"] = np.array(take(3 * n), dtype=float).reshape(n, 3)
        elif key == "CELLS":
            m, size = (int(v) for v in take(2))
            flat = np.array(take(size), dtype=np.int64)
            k = int(flat[0])
            out["cells"] = flat.reshape(m, k + 1)[:, 1:]
        elif key == "CELL_TYPES":
            m = int(take()[0])
            out["cell_types"] = np.array(take(m), dtype=np.int64)
        elif key in ("POINT_DATA", "CELL_DATA"):
            current = "point_data" if key == "POINT_DATA" else "cell_data"
            sizes[current] = int(take()[0])
        elif key == "SCALARS":
            name = take(3)[0]
            take(2)  # LOOKUP_TABLE default
            out[current][name] = np.array(take(sizes[current]), dtype=float)
        elif key == "VECTORS":
            name = take(2)[0]
            out[current][name] = np.array(take(3 * sizes[current]), dtype=float).reshape(-1, 3)
        else:
            raise OutputError(f"{path}: unexpected token {key!r}")
    return out


def cell_averages(space, dofs):
    """Mean value of a scalar field over each cell."""
    return cell_integrals(space, dofs, degree=max(2, 2 * space.degree)) / space.mesh.cell_volumes


def export_fields(path, u_space, p_space, state, title="poroeg"):
    """Snapshot of displacement, pressure, volumetric strain and mobility.

    Displacement is the P2 field restricted to the mesh vertices.  Pressure
    is written as a cell average for every method, and additionally as
    vertex values when the pressure space is continuous.
    """
    mesh = u_space.mesh
    d = mesh.dim
    u = np.asarray(state.u_curr).reshape(-1, d)[:mesh.n_vertices]
    points = {"displacement": u}
    if p_space.kind == "CG":
        points["pressure"] = np.asarray(state.p_curr)[:mesh.n_vertices]
    cells = {"pressure": cell_averages(p_space, state.p_curr), "eps_v": state.eps_v, "kappa": state.kappa}
    write_vtk(path, mesh, points, cells, title=title)


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def package_versions() -> Dict[str, str]:
    import scipy
    from importlib import metadata
    try:
        own = metadata.version("poroeg")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"poroeg": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(path, config_text: str, seed: int, extra: Optional[Mapping] = None):
    """JSON record of what produced a run directory."""
    record = {"config_sha256": config_digest(config_text), "seed": int(seed), "versions": package_versions()}
    record.update(extra or {})
    try:
        Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return record
