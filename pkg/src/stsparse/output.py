"""File output: legacy VTK, line samples and CSV logs.

Every float is written with 17 significant digits so that a value read back
is bit-identical and reruns diff cleanly.
"""

import csv
import io

import numpy as np

from .control import ActiveSet

VTK_CELL_TYPE = {2: 5, 3: 10}  # triangle, tetrahedron


class PointOutsideMesh(ValueError):
    pass


def fmt(x):
    return f"{float(x):.17g}"


# -- VTK --------------------------------------------------------------------------

def _split_fields(mesh, fields):
    point, cell = [], []
    for item in fields:
        if len(item) == 3:
            name, values, where = item
        else:
            name, values = item
            n = len(values)
            if n == mesh.num_vertices == mesh.num_elements:
                raise ValueError(f"field {name!r} is ambiguous; give 'point' or 'cell'")
            where = "point" if n == mesh.num_vertices else "cell"
        values = np.asarray(values)
        size = mesh.num_vertices if where == "point" else mesh.num_elements
        if where not in ("point", "cell") or values.shape != (size,):
            raise ValueError(f"field {name!r} does not fit the mesh")
        if " " in name:
            raise ValueError("VTK field names must not contain spaces")
        (point if where == "point" else cell).append((name, values))
    return point, cell


def _scalars(out, name, values):
    if np.issubdtype(values.dtype, np.integer):
        out.append(f"SCALARS {name} int 1")
        out.append("LOOKUP_TABLE default")
        out.extend(str(int(v)) for v in values)
    else:
        out.append(f"SCALARS {name} double 1")
        out.append("LOOKUP_TABLE default")
        out.extend(fmt(v) for v in values)


def format_vtk(mesh, fields=(), title="space-time solution"):
    """Legacy ASCII UNSTRUCTURED_GRID text.

    ``fields`` holds ``(name, values)`` or ``(name, values, "point"|"cell")``;
    the location is inferred from the length when not given.  Integer arrays
    are written as ``int`` scalars, everything else as ``double``.  Meshes of
    a 1+1 dimensional cylinder get z = 0.
    """
    point, cell = _split_fields(mesh, fields)
    D1 = mesh.dim + 1
    out = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.num_vertices} double"]
    pad = 3 - mesh.dim
    for v in mesh.vertices:
        out.append(" ".join(fmt(c) for c in v) + " 0" * pad)
    out.append(f"CELLS {mesh.num_elements} {mesh.num_elements * (D1 + 1)}")
    for e in mesh.oriented_elements():
        out.append(f"{D1} " + " ".join(str(int(i)) for i in e))
    out.append(f"CELL_TYPES {mesh.num_elements}")
    out.extend([str(VTK_CELL_TYPE[mesh.dim])] * mesh.num_elements)
    if point:
        out.append(f"POINT_DATA {mesh.num_vertices}")
        for name, values in point:
            _scalars(out, name, values)
    if cell:
        out.append(f"CELL_DATA {mesh.num_elements}")
        for name, values in cell:
            _scalars(out, name, values)
    return "\n".join(out) + "\n"


def export_vtk(mesh, fields, path, title="space-time solution"):
    text = format_vtk(mesh, fields, title)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)
    return path


def solution_fields(state):
    """Standard field list of an optimality state; the active-set labels
    use the integer encoding of :class:`ActiveSet`."""
    return [
        ("u", state.u, "point"),
        ("p", state.p, "point"),
        ("z", state.z, "cell"),
        ("pbar", state.pbar, "cell"),
        ("lambda", state.lam, "cell"),
        ("active_set", np.asarray(state.labels, dtype=np.int32), "cell"),
    ]


# -- line samples -------------------------------------------------------------------

def locate(mesh, x, tol=1e-12, inv=None):
    """Lowest-index element containing ``x`` and the barycentric coordinates
    of ``x`` in it."""
    x = np.asarray(x, dtype=float)
    if inv is None:
        inv = _inverse_jacobians(mesh)
    v0 = mesh.vertices[mesh.elements[:, 0]]
    lam = np.einsum("eij,ej->ei", inv, x[None, :] - v0)
    bary = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
    inside = np.flatnonzero(np.all(bary >= -tol, axis=1))
    if len(inside) == 0:
        raise PointOutsideMesh(f"point {tuple(float(c) for c in x)} lies outside the mesh")
    e = int(inside[0])
    return e, bary[e]


def _inverse_jacobians(mesh):
    # rows of _jacobians are edge vectors; solve J^T lam = x - v0
    return np.linalg.inv(np.transpose(mesh._jacobians, (0, 2, 1)))


def sample_line(mesh, field, p0, p1, n):
    """Sample ``field`` at ``n + 1`` equispaced points from ``p0`` to ``p1``.

    Nodal fields (length nv) are interpolated barycentrically; element
    fields (length ne) take the value of the containing element.  Points on
    interfaces belong to the lowest-index element that contains them.
    Returns rows ``(s, *x, value)``.
    """
    field = np.asarray(field)
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    if p0.shape != (mesh.dim,) or p1.shape != (mesh.dim,):
        raise ValueError(f"endpoints need {mesh.dim} coordinates")
    if n < 1:
        raise ValueError("n must be positive")
    nodal = len(field) == mesh.num_vertices
    if not nodal and len(field) != mesh.num_elements:
        raise ValueError("field matches neither vertices nor elements")
    inv = _inverse_jacobians(mesh)
    rows = []
    for k in range(n + 1):
        s = k / n
        x = (1.0 - s) * p0 + s * p1
        e, bary = locate(mesh, x, inv=inv)
        if nodal:
            val = float(bary @ field[mesh.elements[e]])
        else:
            val = float(field[e])
        rows.append((s, *x, val))
    return rows


def sample_fields(mesh, fields, p0, p1, n):
    """Like :func:`sample_line` for several named fields at once; returns
    ``(header, rows)``."""
    names = [name for name, _ in fields]
    cols = [sample_line(mesh, values, p0, p1, n) for _, values in fields]
    coords = [f"x{i + 1}" for i in range(mesh.d)] + ["t"]
    header = ["s", *coords, *names]
    rows = [list(cols[0][k][:-1]) + [c[k][-1] for c in cols] for k in range(n + 1)]
    return header, rows


# -- CSV ----------------------------------------------------------------------------------

def _cell(v):
    if isinstance(v, (float, np.floating)):
        return fmt(v)
    return str(v)


def format_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows):
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(format_csv(header, rows))
    return path


CONVERGENCE_HEADER = ["step", "stage", "iteration", "residual", "relative_residual",
                      "omega", "A_a", "A_b", "A_0", "I_minus", "I_plus", "linear_iterations"]


def convergence_rows(report, step=0):
    """Rows of the Newton log, earlier attempts (failed zero start, nonsparse
    presolve) first."""
    rows = []
    if report.failed_attempt is not None:
        rows += _report_rows(report.failed_attempt, step, "failed-" + report.failed_attempt.start,
                             report.reference)
    if report.presolve is not None:
        rows += _report_rows(report.presolve, step, "presolve", report.presolve.reference)
    rows += _report_rows(report, step, report.start, report.reference)
    return rows


def _report_rows(rep, step, stage, reference):
    ref = reference if reference else rep.residuals[0]
    rows = []
    for k, r in enumerate(rep.residuals):
        c = rep.active_counts[k]
        lin = rep.linear[k - 1].iterations if k > 0 and k - 1 < len(rep.linear) else 0
        rows.append([step, stage, k, float(r), float(r / ref) if ref else 0.0,
                     float(rep.omegas[k]) if k > 0 else "",
                     c[ActiveSet.LOWER], c[ActiveSet.UPPER], c[ActiveSet.ZERO],
                     c[ActiveSet.INACTIVE_MINUS], c[ActiveSet.INACTIVE_PLUS], lin])
    return rows
