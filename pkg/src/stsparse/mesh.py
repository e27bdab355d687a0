"""Conforming simplicial meshes of the space-time cylinder (0,1)^d x (0,T).

Time is stored as the last coordinate of every vertex.  Triangles are used
for d = 1 and tetrahedra for d = 2.
"""

from dataclasses import dataclass, replace
from enum import IntEnum
from functools import cached_property
from itertools import combinations, permutations
from math import factorial

import numpy as np


class BoundaryPart(IntEnum):
    LATERAL = 0
    INITIAL = 1
    TERMINAL = 2


class MeshError(ValueError):
    pass


# relative tolerance for detecting t = 0, t = T and the spatial box faces
GEOM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class SpaceTimeMesh:
    """Immutable simplicial mesh of Q = (0,1)^d x (0,T).

    ``vertex_parents`` records, for vertices created by refinement, the two
    endpoints of the edge they bisect (``-1`` for vertices of the coarse
    mesh).  It is what makes nodal prolongation exact for P1 functions.
    """

    vertices: np.ndarray
    elements: np.ndarray
    T: float = 1.0
    vertex_parents: np.ndarray = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        e = np.ascontiguousarray(self.elements, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] not in (2, 3):
            raise MeshError("vertices must be an (nv, 2) or (nv, 3) array")
        if e.ndim != 2 or e.shape[1] != v.shape[1] + 1:
            raise MeshError("elements must hold dim+1 vertex indices")
        if e.size and (e.min() < 0 or e.max() >= len(v)):
            raise MeshError("element refers to a vertex that does not exist")
        v.flags.writeable = False
        e.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "elements", e)
        if self.vertex_parents is None:
            parents = np.full((len(v), 2), -1, dtype=np.int64)
        else:
            parents = np.asarray(self.vertex_parents, dtype=np.int64)
        parents.flags.writeable = False
        object.__setattr__(self, "vertex_parents", parents)

    # -- sizes -------------------------------------------------------------
    @property
    def dim(self):
        """Space-time dimension d + 1."""
        return self.vertices.shape[1]

    @property
    def d(self):
        return self.dim - 1

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_elements(self):
        return len(self.elements)

    # -- geometry ----------------------------------------------------------
    @cached_property
    def _jacobians(self):
        x = self.vertices[self.elements]
        return x[:, 1:, :] - x[:, :1, :]

    @cached_property
    def signed_volumes(self):
        return np.linalg.det(self._jacobians) / factorial(self.dim)

    @cached_property
    def element_volumes(self):
        return np.abs(self.signed_volumes)

    @cached_property
    def element_diameters(self):
        x = self.vertices[self.elements]
        diam = np.zeros(self.num_elements)
        for i, j in combinations(range(self.dim + 1), 2):
            diam = np.maximum(diam, np.linalg.norm(x[:, i] - x[:, j], axis=1))
        return diam

    @property
    def h(self):
        return float(self.element_diameters.max())

    @cached_property
    def centroids(self):
        return self.vertices[self.elements].mean(axis=1)

    def oriented_elements(self):
        """Element connectivity with two vertices swapped wherever needed so
        that every signed volume is positive.  The stored ordering is kept
        as generated because uniform refinement depends on it."""
        e = self.elements.copy()
        neg = self.signed_volumes < 0
        e[neg, 0], e[neg, 1] = self.elements[neg, 1], self.elements[neg, 0]
        return e

    # -- topology ----------------------------------------------------------
    @cached_property
    def _facet_data(self):
        n = self.dim + 1
        # facet k of an element is the one opposite local vertex k
        local = np.array([[j for j in range(n) if j != k] for k in range(n)])
        f = np.sort(self.elements[:, local], axis=2).reshape(-1, self.dim)
        facets, inverse, counts = np.unique(
            f, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(self.num_elements, n)
        owners = np.full((len(facets), 2), -1, dtype=np.int64)
        flat_elem = np.repeat(np.arange(self.num_elements), n)
        flat_fac = inverse.ravel()
        order = np.argsort(flat_fac, kind="stable")
        first = np.ones(len(order), dtype=bool)
        first[1:] = flat_fac[order][1:] != flat_fac[order][:-1]
        owners[flat_fac[order][first], 0] = flat_elem[order][first]
        owners[flat_fac[order][~first], 1] = flat_elem[order][~first]
        return facets, inverse, counts, owners

    @property
    def facets(self):
        return self._facet_data[0]

    @property
    def element_facets(self):
        return self._facet_data[1]

    @property
    def facet_elements(self):
        """(nf, 2) adjacent element ids; second column is -1 on the boundary."""
        return self._facet_data[3]

    @cached_property
    def boundary_facets(self):
        facets, _, counts, _ = self._facet_data
        return facets[counts == 1]

    @cached_property
    def boundary_parts(self):
        return _classify(self.vertices, self.boundary_facets, self.T)

    @cached_property
    def edges(self):
        pairs = list(combinations(range(self.dim + 1), 2))
        e = np.sort(self.elements[:, pairs], axis=2).reshape(-1, 2)
        return np.unique(e, axis=0)

    def vertices_on(self, *parts):
        """Sorted ids of vertices lying on a facet of the given parts."""
        mask = np.isin(self.boundary_parts, [int(p) for p in parts])
        return np.unique(self.boundary_facets[mask])

    def is_conforming(self):
        facets, _, counts, _ = self._facet_data
        if counts.max() > 2:
            return False
        bf = facets[counts == 1]
        return bool(np.all(_on_cylinder_boundary(self.vertices, bf, self.T)))

    def __repr__(self):
        return (f"SpaceTimeMesh(d={self.d}, nv={self.num_vertices}, "
                f"ne={self.num_elements}, h={self.h:.4g})")


def _on_cylinder_boundary(vertices, facets, T):
    x = vertices[facets]  # (nf, D, D)
    t = x[..., -1]
    tol_t = GEOM_TOL * T
    on = np.all(np.abs(t) <= tol_t, axis=1) | np.all(np.abs(t - T) <= tol_t, axis=1)
    for k in range(vertices.shape[1] - 1):
        xk = x[..., k]
        on |= np.all(np.abs(xk) <= GEOM_TOL, axis=1)
        on |= np.all(np.abs(xk - 1.0) <= GEOM_TOL, axis=1)
    return on


def _classify(vertices, facets, T):
    t = vertices[facets][..., -1]
    tol = GEOM_TOL * T
    initial = np.all(np.abs(t) <= tol, axis=1)
    terminal = np.all(np.abs(t - T) <= tol, axis=1)
    parts = np.full(len(facets), BoundaryPart.LATERAL, dtype=np.int8)
    parts[initial] = BoundaryPart.INITIAL
    parts[terminal] = BoundaryPart.TERMINAL
    bad = ~_on_cylinder_boundary(vertices, facets, T)
    if np.any(bad):
        raise MeshError(
            f"{int(bad.sum())} boundary facet(s) do not lie on the boundary of "
            "the space-time cylinder (degenerate or non-conforming mesh)")
    return parts


def classify_boundary(mesh, T):
    """Return ``mesh`` with terminal time ``T`` and its boundary facets
    labelled.  Raises :class:`MeshError` for facets that are neither on
    t = 0, t = T nor on the lateral boundary."""
    if T <= 0:
        raise MeshError("T must be positive")
    out = mesh if mesh.T == T else replace(mesh, T=float(T))
    out.boundary_parts  # noqa: B018  (forces validation)
    return out


# -- construction ------------------------------------------------------------

def build_unit_cylinder(d, n, T=1.0):
    """Structured mesh of (0,1)^d x (0,T) with ``n`` cells per axis.

    Squares are split along the (0,0)-(1,1) diagonal; cubes into the six
    Kuhn tetrahedra, one per permutation of the axes.
    """
    if d not in (1, 2):
        raise MeshError(f"spatial dimension must be 1 or 2, got {d}")
    if int(n) != n or n < 1:
        raise MeshError(f"n must be a positive integer, got {n}")
    n = int(n)
    D = d + 1
    ticks = np.linspace(0.0, 1.0, n + 1)
    grids = np.meshgrid(*([ticks] * D), indexing="ij")
    # vertex (i0, ..., i_{D-1}) gets id i0 + (n+1) i1 + ..., axis 0 fastest
    vertices = np.stack([g.transpose(*range(D)[::-1]).ravel() for g in grids], axis=1)
    vertices[:, -1] *= T
    strides = (n + 1) ** np.arange(D)
    corners = np.stack(np.meshgrid(*([np.arange(n)] * D), indexing="ij"), axis=-1)
    base = (corners.reshape(-1, D) @ strides)
    base = np.sort(base)
    elems = []
    for perm in permutations(range(D)):
        offs = [0]
        for ax in perm:
            offs.append(offs[-1] + strides[ax])
        elems.append(base[:, None] + np.array(offs)[None, :])
    elements = np.stack(elems, axis=1).reshape(-1, D + 1)
    return SpaceTimeMesh(vertices, elements, T=float(T))


_TRI_CHILDREN = [(0, "01", "02"), ("01", 1, "12"), ("02", "12", 2), ("01", "12", "02")]

# Bey's octasection; the interior diagonal joins the midpoints of 02 and 13
_TET_CHILDREN = [
    (0, "01", "02", "03"),
    ("01", 1, "12", "13"),
    ("02", "12", 2, "23"),
    ("03", "13", "23", 3),
    ("01", "02", "03", "13"),
    ("01", "02", "12", "13"),
    ("02", "03", "13", "23"),
    ("02", "12", "13", "23"),
]


def refine_uniform(mesh):
    """Split every triangle into 4 and every tetrahedron into 8 children."""
    D = mesh.dim
    pairs = list(combinations(range(D + 1), 2))
    e = np.sort(mesh.elements[:, pairs], axis=2).reshape(-1, 2)
    edges, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.reshape(mesh.num_elements, len(pairs))
    nv = mesh.num_vertices
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    local = {f"{i}{j}": k for k, (i, j) in enumerate(pairs)}

    def column(tag):
        if isinstance(tag, int):
            return mesh.elements[:, tag]
        return nv + inv[:, local[tag]]

    template = _TRI_CHILDREN if D == 2 else _TET_CHILDREN
    children = np.stack(
        [np.stack([column(tag) for tag in child], axis=1) for child in template], axis=1)
    return SpaceTimeMesh(
        np.vstack([mesh.vertices, mid]),
        children.reshape(-1, D + 1),
        T=mesh.T,
        vertex_parents=np.vstack([mesh.vertex_parents, edges]),
    )


def refine_adaptive(mesh, marked):
    """Refine the marked elements by longest-edge bisection.

    Conformity is restored by the usual recursive closure: any element that
    contains an edge scheduled for bisection has its own longest edge
    scheduled as well.  Edge lengths are compared through a key that breaks
    ties by vertex ids, so every element agrees on what its longest edge is.
    Marking every element falls back to :func:`refine_uniform`.
    """
    marked = sorted(set(int(i) for i in marked))
    if not marked:
        return mesh
    if marked[0] < 0 or marked[-1] >= mesh.num_elements:
        raise MeshError("marked element id out of range")
    if len(marked) == mesh.num_elements:
        return refine_uniform(mesh)

    D1 = mesh.dim + 1
    pairs = list(combinations(range(D1), 2))
    coords = [tuple(v) for v in mesh.vertices]
    parents = [tuple(p) for p in mesh.vertex_parents]
    elems = [tuple(int(i) for i in e) for e in mesh.elements]
    midpoint = {}
    keys = {}

    def edge_key(a, b):
        if a > b:
            a, b = b, a
        k = keys.get((a, b))
        if k is None:
            pa, pb = coords[a], coords[b]
            l2 = sum((x - y) ** 2 for x, y in zip(pa, pb))
            k = (round(l2, 13), a, b)
            keys[(a, b)] = k
        return k

    def longest(e):
        return max(edge_key(e[i], e[j]) for i, j in pairs)[1:]

    def edges_of(e):
        return [(min(e[i], e[j]), max(e[i], e[j])) for i, j in pairs]

    pending = {longest(elems[i]) for i in marked}
    while pending:
        edge_elems = {}
        for idx, e in enumerate(elems):
            for ed in edges_of(e):
                edge_elems.setdefault(ed, []).append(idx)
        work = sorted(pending)
        while work:
            ed = work.pop()
            for idx in edge_elems[ed]:
                le = longest(elems[idx])
                if le not in pending:
                    pending.add(le)
                    work.append(le)
        new = []
        for e in elems:
            a, b = longest(e)
            if (a, b) not in pending:
                new.append(e)
                continue
            m = midpoint.get((a, b))
            if m is None:
                m = len(coords)
                coords.append(tuple(0.5 * (x + y) for x, y in zip(coords[a], coords[b])))
                parents.append((a, b))
                midpoint[(a, b)] = m
            new.append(tuple(m if v == b else v for v in e))
            new.append(tuple(m if v == a else v for v in e))
        elems = new
        alive = set()
        for e in elems:
            alive.update(ed for ed in edges_of(e) if ed in pending)
        pending = alive
    return SpaceTimeMesh(np.array(coords), np.array(elems), T=mesh.T,
                         vertex_parents=np.array(parents))


# -- plain-text exchange format ------------------------------------------------

def format_mesh_text(mesh):
    """Mesh as text: a "dim nv ne" header, one vertex per line, one element
    per line, then the boundary facets each followed by its part label.
    Coordinates carry 17 significant digits so a round trip is exact."""
    lines = [f"{mesh.dim} {mesh.num_vertices} {mesh.num_elements}"]
    lines += [" ".join(f"{c:.17g}" for c in v) for v in mesh.vertices]
    lines += [" ".join(str(int(i)) for i in e) for e in mesh.elements]
    for f, part in zip(mesh.boundary_facets, mesh.boundary_parts):
        lines.append(" ".join(str(int(i)) for i in f) + f" {int(part)}")
    return "\n".join(lines) + "\n"


def write_mesh_text(mesh, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_mesh_text(mesh))


def parse_mesh_text(text):
    """Inverse of :func:`format_mesh_text`.  T is taken as the largest time
    coordinate; the boundary section is checked against the classification
    recomputed from the geometry."""
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not rows or len(rows[0]) != 3:
        raise MeshError("mesh text must start with a 'dim nv ne' header")
    try:
        dim, nv, ne = (int(x) for x in rows[0])
        verts = np.array([[float(x) for x in r] for r in rows[1:1 + nv]])
        elems = np.array([[int(x) for x in r] for r in rows[1 + nv:1 + nv + ne]])
        bnd = np.array([[int(x) for x in r] for r in rows[1 + nv + ne:]], dtype=np.int64)
    except ValueError as exc:
        raise MeshError(f"malformed mesh text: {exc}") from None
    if verts.shape != (nv, dim) or elems.shape != (ne, dim + 1):
        raise MeshError("mesh text does not match its header")
    mesh = SpaceTimeMesh(verts, elems, T=float(verts[:, -1].max()))
    expect = {tuple(sorted(f)): int(p) for f, p in zip(mesh.boundary_facets, mesh.boundary_parts)}
    if len(bnd) and bnd.shape[1] != dim + 1:
        raise MeshError("boundary facet lines need dim vertex ids and a part label")
    got = {tuple(sorted(r[:-1])): int(r[-1]) for r in bnd}
    if got != expect:
        raise MeshError("boundary section disagrees with the mesh geometry")
    return mesh


def read_mesh_text(path):
    with open(path, encoding="ascii") as fh:
        return parse_mesh_text(fh.read())
