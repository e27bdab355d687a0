"""P1 space-time finite elements: geometry cache, constrained spaces and the
matrices and vectors of the discrete state/adjoint system.

All assembly routines first build the operator over every mesh vertex and
then restrict rows to the test space and columns to the trial space.
"""

from enum import Enum
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import BoundaryPart
from .quadrature import simplex_rule


class Space(Enum):
    STATE = "state"  # vanishes on the initial face (and laterally for Dirichlet)
    ADJOINT = "adjoint"  # vanishes on the terminal face (and laterally for Dirichlet)
    FULL = "full"


class BC(Enum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


class FESpace:
    """Geometry, quadrature and degree-of-freedom bookkeeping for one mesh."""

    def __init__(self, mesh, bc=BC.DIRICHLET, rule=None):
        self.mesh = mesh
        self.bc = BC(bc)
        self.rule = rule if rule is not None else simplex_rule(mesh.dim)
        D = mesh.dim
        jac = mesh._jacobians  # (ne, D, D), rows are edge vectors
        inv = np.linalg.inv(jac)
        # gradients of barycentric coordinates 1..D are the columns of inv(J)
        g = np.transpose(inv, (0, 2, 1))
        g0 = -g.sum(axis=1, keepdims=True)
        self.grads = np.concatenate([g0, g], axis=1)  # (ne, D+1, D)
        self.vol = mesh.element_volumes
        n = D + 1
        self._rows = np.repeat(mesh.elements, n, axis=1).ravel()
        self._cols = np.tile(mesh.elements, (1, n)).ravel()

    @property
    def nv(self):
        return self.mesh.num_vertices

    # -- degrees of freedom ------------------------------------------------
    def constrained(self, space):
        space = Space(space)
        if space is Space.FULL:
            return np.zeros(0, dtype=np.int64)
        face = BoundaryPart.INITIAL if space is Space.STATE else BoundaryPart.TERMINAL
        parts = [face]
        if self.bc is BC.DIRICHLET:
            parts.append(BoundaryPart.LATERAL)
        return self.mesh.vertices_on(*parts)

    @cached_property
    def _dofs(self):
        out = {}
        for space in Space:
            mask = np.ones(self.nv, dtype=bool)
            mask[self.constrained(space)] = False
            out[space] = np.flatnonzero(mask)
        return out

    def dofs(self, space):
        """Sorted ids of the vertices that carry unknowns of ``space``."""
        return self._dofs[Space(space)]

    # -- assembly helpers --------------------------------------------------
    def matrix(self, ke):
        """Sum element matrices ``ke`` of shape (ne, D+1, D+1) into CSR."""
        A = sp.csr_matrix((ke.ravel(), (self._rows, self._cols)),
                          shape=(self.nv, self.nv))
        A.sum_duplicates()
        A.sort_indices()
        return A

    def vector(self, fe):
        """Sum element vectors ``fe`` of shape (ne, D+1)."""
        return np.bincount(self.mesh.elements.ravel(), weights=fe.ravel(),
                           minlength=self.nv)

    def at_quadrature(self, values):
        """Evaluate a nodal field at the quadrature points, shape (ne, nq)."""
        return values[self.mesh.elements] @ self.rule.points.T

    @cached_property
    def quadrature_points(self):
        """Physical quadrature points, shape (ne, nq, D)."""
        x = self.mesh.vertices[self.mesh.elements]  # (ne, D+1, D)
        return np.einsum("qk,ekd->eqd", self.rule.points, x)

    def evaluate(self, f):
        """Evaluate a callable ``f(x)`` (last axis = coordinates, time last)
        at all quadrature points."""
        return np.asarray(f(self.quadrature_points), dtype=float) * np.ones(
            self.quadrature_points.shape[:2])

    def weighted_mass(self, coef):
        """Element-summed ``int c phi_j phi_i`` for ``coef`` given at the
        quadrature points (ne, nq)."""
        lam = self.rule.points
        w = self.rule.weights
        ke = np.einsum("eq,q,qi,qj->eij", coef, w, lam, lam) * self.vol[:, None, None]
        return self.matrix(ke)

    def weighted_load(self, coef):
        """``int c phi_i`` for ``coef`` at the quadrature points."""
        fe = np.einsum("eq,q,qi->ei", coef, self.rule.weights, self.rule.points)
        return self.vector(fe * self.vol[:, None])

    def integrate(self, coef):
        """Per-element integrals of quadrature-point data (ne, nq)."""
        return (coef @ self.rule.weights) * self.vol

    @cached_property
    def basis_integrals(self):
        """``int_tau phi_i`` for the vertices of each element, (ne,)."""
        return self.vol / (self.mesh.dim + 1)


def restrict(op, rows, cols):
    return op[rows][:, cols]


def _restricted(fe, op, trial, test):
    if trial is None and test is None:
        return op
    rows = fe.dofs(test if test is not None else Space.FULL)
    cols = fe.dofs(trial if trial is not None else Space.FULL)
    return restrict(op, rows, cols)


# -- reaction polynomial -------------------------------------------------------

def reaction(u, roots):
    u1, u2, u3 = roots
    return (u - u1) * (u - u2) * (u - u3)


def reaction_d1(u, roots):
    u1, u2, u3 = roots
    return (u - u1) * (u - u2) + (u - u1) * (u - u3) + (u - u2) * (u - u3)


def reaction_d2(u, roots):
    u1, u2, u3 = roots
    return 2.0 * ((u - u1) + (u - u2) + (u - u3))


# -- operators -----------------------------------------------------------------

def time_derivative_matrix(fe):
    """B[i, j] = int d_t phi_j phi_i over all vertices."""
    dt = fe.grads[:, :, -1]  # (ne, D+1)
    ke = (fe.basis_integrals[:, None, None] * dt[:, None, :]) * np.ones(
        (1, dt.shape[1], 1))
    return fe.matrix(ke)


def spatial_stiffness_matrix(fe):
    """A[i, j] = int grad_x phi_j . grad_x phi_i (time component dropped)."""
    gx = fe.grads[:, :, :-1]
    ke = np.einsum("eid,ejd->eij", gx, gx) * fe.vol[:, None, None]
    return fe.matrix(ke)


def mass_matrix(fe):
    D1 = fe.mesh.dim + 1
    local = (np.ones((D1, D1)) + np.eye(D1)) / (D1 * (D1 + 1))
    return fe.matrix(fe.vol[:, None, None] * local[None])


def assemble_time_derivative(fe, trial=None, test=None):
    return _restricted(fe, time_derivative_matrix(fe), trial, test)


def assemble_spatial_stiffness(fe, trial=None, test=None):
    return _restricted(fe, spatial_stiffness_matrix(fe), trial, test)


def assemble_mass(fe, trial=None, test=None):
    return _restricted(fe, mass_matrix(fe), trial, test)


def assemble_reaction_residual(fe, u, roots, test=None):
    """r[i] = int R(u_h) phi_i, exact for P1 ``u`` (integrand of degree 4)."""
    r = fe.weighted_load(reaction(fe.at_quadrature(u), roots))
    return r if test is None else r[fe.dofs(test)]


def assemble_reaction_jacobian(fe, u, roots, weight=None, trial=None, test=None):
    """``int R'(u) phi_j phi_i``, or ``int R''(u) w phi_j phi_i`` when a
    nodal ``weight`` w is given."""
    uq = fe.at_quadrature(u)
    if weight is None:
        coef = reaction_d1(uq, roots)
    else:
        coef = reaction_d2(uq, roots) * fe.at_quadrature(weight)
    return _restricted(fe, fe.weighted_mass(coef), trial, test)


def l2_inner(fe, f, test=None):
    """b[i] = int f phi_i.

    A callable ``f`` is integrated with the element quadrature rule; an
    array is taken as the nodal values of a P1 function and integrated
    exactly.
    """
    if callable(f):
        b = fe.weighted_load(fe.evaluate(f))
    else:
        b = mass_matrix(fe) @ np.asarray(f, dtype=float)
    return b if test is None else b[fe.dofs(test)]


def apply_constraints(fe, op, rhs, test, trial=None):
    """Eliminate constrained rows/columns by restriction to free dofs."""
    trial = test if trial is None else trial
    rows, cols = fe.dofs(test), fe.dofs(trial)
    return restrict(sp.csr_matrix(op), rows, cols), np.asarray(rhs)[rows]


def interpolate(mesh, f):
    """Nodal values of ``f`` at the mesh vertices."""
    return np.asarray(f(mesh.vertices), dtype=float) * np.ones(mesh.num_vertices)


def prolongate(fine_mesh, coarse_values):
    """Exact P1 prolongation onto a mesh obtained by refinement."""
    n0 = len(coarse_values)
    out = np.empty(fine_mesh.num_vertices)
    out[:n0] = coarse_values
    parents = fine_mesh.vertex_parents
    for i in range(n0, fine_mesh.num_vertices):
        a, b = parents[i]
        out[i] = 0.5 * (out[a] + out[b])
    return out


def l2_error(fe, u, exact):
    """||u_h - u||_{L2(Q)} with ``exact`` evaluated at the quadrature points."""
    diff = fe.at_quadrature(np.asarray(u, dtype=float)) - fe.evaluate(exact)
    return float(np.sqrt(fe.integrate(diff ** 2).sum()))
