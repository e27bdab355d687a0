"""Coupled state/adjoint optimality system and its semismooth Newton solver.

Unknowns are the nodal values of the state ``u`` on the free vertices of
the state space and of the adjoint ``p`` on the free vertices of the
adjoint space, stored contiguously as ``[u; p]``.  The element control is
eliminated through the projection formula, so every Newton step is one
step of a primal-dual active set method.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import control as ctl
from .control import ActiveSet
from .fem import (
    BC,
    FESpace,
    Space,
    interpolate,
    l2_error,
    mass_matrix,
    prolongate,
    reaction,
    reaction_d1,
    spatial_stiffness_matrix,
    time_derivative_matrix,
)
from .linalg import SolverConfig, SolverError, solve_linear
from .mesh import BoundaryPart, build_unit_cylinder, refine_adaptive, refine_uniform

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    pass


class LinearSolveFailed(OptimizationError):
    pass


class LineSearchFailed(OptimizationError):
    pass


class NotConverged(OptimizationError):
    def __init__(self, msg, report=None, state=None):
        super().__init__(msg)
        self.report = report
        self.state = state


@dataclass
class NewtonConfig:
    tol: float = 1e-5
    maxiter: int = 100
    omega: float = 1.0  # first trial step length
    omega_min: float = 2.0 ** -6
    line_search: bool = True
    # "zero": u = lifted initial datum, p = 0.  "nonsparse": start from the
    # mu = 0 solution on the same mesh.  "auto": zero, and for mu > 0 retry
    # from the nonsparse solution if that fails.
    start: str = "auto"

    def __post_init__(self):
        if self.start not in ("auto", "zero", "nonsparse"):
            raise ValueError(f"unknown start strategy {self.start!r}")
        if not 0.0 < self.tol < 1.0:
            raise ValueError("tol must lie in (0, 1)")
        if not 0.0 < self.omega <= 1.0:
            raise ValueError("omega must lie in (0, 1]")
        if not 0.0 < self.omega_min <= self.omega:
            raise ValueError("omega_min must lie in (0, omega]")


@dataclass
class NewtonReport:
    residuals: list = field(default_factory=list)
    omegas: list = field(default_factory=list)
    active_counts: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    linear: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0
    reference: float = None  # residual of the zero start; tolerances are relative to it
    start: str = "zero"
    presolve: "NewtonReport" = None
    failed_attempt: "NewtonReport" = None

    @property
    def iterations(self):
        return len(self.residuals) - 1

    @property
    def relative_residuals(self):
        r0 = self.reference if self.reference is not None else self.residuals[0]
        return [r / r0 if r0 > 0 else 0.0 for r in self.residuals]

    @property
    def total_iterations(self):
        extra = 0
        for rep in (self.presolve, self.failed_attempt):
            if rep is not None:
                extra += rep.total_iterations
        return self.iterations + extra


@dataclass
class OptimalityState:
    """Full nodal vectors ``u`` and ``p`` plus the quantities derived from
    ``p``.  Constrained entries hold the boundary/initial values."""

    u: np.ndarray
    p: np.ndarray
    pbar: np.ndarray
    lam: np.ndarray
    z: np.ndarray
    labels: np.ndarray


class OptimalitySystem:
    """Discrete optimality system of one problem on one mesh.

    Constant operators are assembled once; the nonlinear pieces are
    reassembled for every evaluation.
    """

    def __init__(self, problem, mesh, solver=None):
        if mesh.d != problem.d:
            raise ValueError(f"mesh is {mesh.d}+1 dimensional, problem needs d={problem.d}")
        if mesh.T != problem.T:
            from .mesh import classify_boundary
            mesh = classify_boundary(mesh, problem.T)
        self.problem = problem
        self.mesh = mesh
        self.params = problem.params
        self.solver = solver or SolverConfig()
        self.fe = fe = FESpace(mesh, bc=problem.bc)
        self.B = time_derivative_matrix(fe)
        self.A = spatial_stiffness_matrix(fe)
        self.M = mass_matrix(fe)
        self.sdofs = fe.dofs(Space.STATE)
        self.adofs = fe.dofs(Space.ADJOINT)
        self.target_load = fe.weighted_load(fe.evaluate(problem.target))
        if problem.source is not None:
            self.source_load = fe.weighted_load(fe.evaluate(problem.source))
        else:
            self.source_load = np.zeros(fe.nv)
        self.u_fixed = self._fixed_state()
        nv = fe.nv
        self._rows = np.concatenate([self.sdofs, nv + self.adofs])

    @property
    def num_unknowns(self):
        return len(self.sdofs) + len(self.adofs)

    def _fixed_state(self):
        mesh = self.mesh
        u = np.zeros(mesh.num_vertices)
        init = mesh.vertices_on(BoundaryPart.INITIAL)
        u[init] = self.problem.u0(mesh.vertices[init, :-1])
        if self.problem.bc is BC.DIRICHLET:
            u[mesh.vertices_on(BoundaryPart.LATERAL)] = 0.0
            # the initial datum wins on the corner where both apply
            u[init] = self.problem.u0(mesh.vertices[init, :-1])
        return u

    # -- state handling ---------------------------------------------------------
    def make_state(self, u, p):
        pbar = ctl.element_average(self.mesh, p)
        return OptimalityState(
            u=u, p=p, pbar=pbar,
            lam=ctl.recover_lambda(pbar, self.params.mu),
            z=ctl.recover_control(pbar, self.params),
            labels=ctl.classify_active_sets(pbar, self.params))

    def initial_state(self):
        return self.make_state(self.u_fixed.copy(), np.zeros(self.fe.nv))

    def pack(self, state):
        return np.concatenate([state.u[self.sdofs], state.p[self.adofs]])

    def unpack(self, x):
        u = self.u_fixed.copy()
        p = np.zeros(self.fe.nv)
        ns = len(self.sdofs)
        u[self.sdofs] = x[:ns]
        p[self.adofs] = x[ns:]
        return u, p

    def control_load(self, z):
        """Vector of ``sum_tau z_tau int_tau phi_i``."""
        fe = self.fe
        per = (z * fe.basis_integrals)[:, None] * np.ones((1, self.mesh.dim + 1))
        return fe.vector(per)

    # -- residual and Jacobian -------------------------------------------------
    def state_residual_full(self, u, z):
        fe = self.fe
        rr = fe.weighted_load(reaction(fe.at_quadrature(u), self.problem.roots))
        return (self.B @ u + self.A @ u + rr - self.control_load(z)
                - self.source_load)

    def adjoint_residual_full(self, u, p):
        fe = self.fe
        rp = fe.weighted_mass(reaction_d1(fe.at_quadrature(u), self.problem.roots))
        return -self.M @ u - self.B @ p + self.A @ p + rp @ p + self.target_load

    def residual(self, state):
        r_u = self.state_residual_full(state.u, state.z)[self.sdofs]
        r_p = self.adjoint_residual_full(state.u, state.p)[self.adofs]
        return r_u, r_p, float(np.linalg.norm(np.concatenate([r_u, r_p])))

    def coupling_matrix(self, labels):
        """C[i, j] = 1/rho sum over inactive tau of int_tau phi_i int_tau phi_j / |tau|."""
        fe = self.fe
        D1 = self.mesh.dim + 1
        mask = ctl.inactive_mask(labels, self.params).astype(float)
        coef = mask * fe.vol / (self.params.rho * D1 * D1)
        return fe.matrix(coef[:, None, None] * np.ones((1, D1, D1)))

    def jacobian_blocks(self, state):
        fe = self.fe
        uq = fe.at_quadrature(state.u)
        roots = self.problem.roots
        MR1 = fe.weighted_mass(reaction_d1(uq, roots))
        MR2 = fe.weighted_mass(2.0 * ((uq - roots[0]) + (uq - roots[1]) + (uq - roots[2]))
                               * fe.at_quadrature(state.p))
        C = self.coupling_matrix(state.labels)
        return {
            "uu": self.B + self.A + MR1,
            "up": C,
            "pu": -self.M + MR2,
            "pp": -self.B + self.A + MR1,
        }

    def jacobian(self, state):
        blk = self.jacobian_blocks(state)
        J = sp.bmat([[blk["uu"], blk["up"]], [blk["pu"], blk["pp"]]], format="csr")
        return J[self._rows][:, self._rows]

    # -- forward and adjoint solves for a given control -----------------------
    def solve_state(self, z, u_start=None, tol=1e-12, maxiter=50):
        """Solve the discrete state equation for a fixed element control by
        Newton's method; returns the full nodal state."""
        fe = self.fe
        u = self.u_fixed.copy() if u_start is None else u_start.copy()
        idx = self.sdofs
        r = self.state_residual_full(u, z)[idx]
        scale = max(np.linalg.norm(self.control_load(z)[idx] + self.source_load[idx]),
                    np.linalg.norm(r), 1e-300)
        for _ in range(maxiter):
            if np.linalg.norm(r) <= tol * scale:
                return u
            J = (self.B + self.A + fe.weighted_mass(
                reaction_d1(fe.at_quadrature(u), self.problem.roots)))[idx][:, idx]
            du = self._linear(J, -r)
            u[idx] += du
            r = self.state_residual_full(u, z)[idx]
        if np.linalg.norm(r) <= 1e3 * tol * scale:
            return u
        raise NotConverged(f"state solve stalled at residual {np.linalg.norm(r):.3e}")

    def solve_adjoint(self, u):
        """Adjoint of the optimality system for a given state."""
        fe = self.fe
        idx = self.adofs
        MR1 = fe.weighted_mass(reaction_d1(fe.at_quadrature(u), self.problem.roots))
        K = (-self.B + self.A + MR1)[idx][:, idx]
        rhs = (self.M @ u - self.target_load)[idx]
        p = np.zeros(fe.nv)
        p[idx] = self._linear(K, rhs)
        return p

    def solve_discrete_adjoint(self, u):
        """Exact adjoint of the discretised state equation (transpose of its
        Jacobian); lives on the state space."""
        fe = self.fe
        idx = self.sdofs
        MR1 = fe.weighted_mass(reaction_d1(fe.at_quadrature(u), self.problem.roots))
        K = (self.B + self.A + MR1)[idx][:, idx]
        g = (fe.weighted_load(fe.at_quadrature(u) - fe.evaluate(self.problem.target)))[idx]
        y = np.zeros(fe.nv)
        y[idx] = self._linear(sp.csr_matrix(K.T), g)
        return y

    def _linear(self, A, b):
        try:
            x, _ = solve_linear(A, b, self.solver)
        except SolverError as exc:
            raise LinearSolveFailed(str(exc)) from exc
        return x

    def reduced_objective(self, z, u_start=None):
        u = self.solve_state(z, u_start=u_start)
        return ctl.evaluate_objective(self.fe, u, z, self.problem.target, self.params), u

    def reduced_gradient(self, z, adjoint="optimality"):
        """Element gradient of the reduced objective's smooth part,
        ``int_tau p + rho |tau| z_tau``.

        ``adjoint="optimality"`` uses the adjoint equation of the coupled
        system; ``"discrete"`` the transpose of the discrete state operator.
        """
        u = self.solve_state(z)
        if adjoint == "optimality":
            p = self.solve_adjoint(u)
            ip = self.fe.vol * ctl.element_average(self.mesh, p)
        elif adjoint == "discrete":
            y = self.solve_discrete_adjoint(u)
            ip = self.fe.vol * ctl.element_average(self.mesh, y)
        else:
            raise ValueError(f"unknown adjoint kind {adjoint!r}")
        return ip + self.params.rho * self.fe.vol * z


# -- module-level operations -----------------------------------------------------

def residual(system, state):
    return system.residual(state)


def newton_system(system, state):
    """Jacobian and right-hand side ``-F`` of the Newton step."""
    r_u, r_p, _ = system.residual(state)
    return system.jacobian(state), -np.concatenate([r_u, r_p])


def newton_step(system, state, config=None, norm=None):
    """One damped semismooth Newton step.

    Starts at ``config.omega`` and halves while the residual norm does not
    decrease, down to ``config.omega_min``.  Returns
    ``(new_state, step_norm, omega, new_norm, solve_info)``.
    """
    config = config or NewtonConfig()
    J, rhs = newton_system(system, state)
    if norm is None:
        norm = float(np.linalg.norm(rhs))
    try:
        dx, info = solve_linear(J, rhs, system.solver)
    except SolverError as exc:
        raise LinearSolveFailed(str(exc)) from exc
    x = system.pack(state)
    omega = config.omega
    while True:
        trial = system.make_state(*system.unpack(x + omega * dx))
        new_norm = system.residual(trial)[2]
        if not config.line_search or new_norm < norm:
            break
        omega *= 0.5
        if omega < config.omega_min:
            raise LineSearchFailed(
                f"residual {norm:.3e} not reduced down to omega={config.omega_min:g}")
    return trial, float(np.linalg.norm(dx)), omega, new_norm, info


def solve(problem, mesh, config=None, solver=None, initial=None, system=None):
    """Semismooth Newton iteration on the coupled optimality system.

    Convergence means ``||F(x_k)|| <= tol * ||F(x_ref)||`` where ``x_ref`` is
    the zero start (lifted initial datum, p = 0).  Returns
    ``(system, state, report)``; raises :class:`NotConverged` with the
    report attached otherwise.
    """
    config = config or NewtonConfig()
    system = system or OptimalitySystem(problem, mesh, solver)
    if initial is not None:
        return system, *_newton(system, initial, config, "given")
    sparse = problem.params.mu > 0
    if config.start == "nonsparse" and sparse:
        return system, *_staged(problem, system, config)
    try:
        return system, *_newton(system, system.initial_state(), config, "zero")
    except NotConverged as exc:
        if config.start != "auto" or not sparse:
            raise
        log.info("zero start failed (%s); restarting from the nonsparse solution", exc)
        state, report = _staged(problem, system, config)
        report.failed_attempt = exc.report
        return system, state, report


def _staged(problem, system, config):
    nonsparse = problem.with_params(mu=0.0)
    pre_sys = OptimalitySystem(nonsparse, system.mesh, system.solver)
    pre_state, pre_report = _newton(pre_sys, pre_sys.initial_state(), config, "zero")
    state, report = _newton(system, system.make_state(pre_state.u, pre_state.p),
                            config, "nonsparse")
    report.presolve = pre_report
    return state, report


def _newton(system, state, config, start):
    t0 = time.perf_counter()
    report = NewtonReport(start=start)
    report.reference = system.residual(system.initial_state())[2]
    norm = system.residual(state)[2]
    report.residuals.append(norm)
    report.omegas.append(float("nan"))
    report.active_counts.append(ctl.active_set_counts(state.labels))
    report.labels.append(state.labels.copy())
    r_ref = report.reference if report.reference > 0 else norm
    while norm > config.tol * r_ref:
        if report.iterations >= config.maxiter:
            report.wall_time = time.perf_counter() - t0
            raise NotConverged(
                f"no convergence in {config.maxiter} Newton iterations "
                f"(relative residual {norm / r_ref:.3e})", report, state)
        try:
            state, _, omega, norm, info = newton_step(system, state, config, norm)
        except OptimizationError as exc:
            report.wall_time = time.perf_counter() - t0
            raise NotConverged(str(exc), report, state) from exc
        report.residuals.append(norm)
        report.omegas.append(omega)
        report.active_counts.append(ctl.active_set_counts(state.labels))
        report.labels.append(state.labels.copy())
        report.linear.append(info)
        log.info("newton %3d  residual %.3e  omega %.4g  zero-set %d",
                 report.iterations, norm / r_ref, omega,
                 report.active_counts[-1][ActiveSet.ZERO])
    report.converged = True
    report.wall_time = time.perf_counter() - t0
    return state, report


# -- a posteriori indicator and adaptivity -----------------------------------------

def error_indicator(system, state):
    """Residual-based indicator eta_tau (not squared) for state and adjoint.

    Element part: h^2 times the squared L2 norms of the strong residuals of
    both equations (the spatial Laplacian of a P1 function vanishes
    elementwise).  Facet part: jumps of the spatial normal flux of u and p,
    shared half-and-half by the two neighbours; on lateral Neumann facets the
    flux itself is the jump.
    """
    fe = system.fe
    mesh = system.mesh
    prob = system.problem
    roots = prob.roots
    h = mesh.element_diameters
    uq = fe.at_quadrature(state.u)
    pq = fe.at_quadrature(state.p)
    dt_u = np.einsum("ek,ek->e", state.u[mesh.elements], fe.grads[:, :, -1])
    dt_p = np.einsum("ek,ek->e", state.p[mesh.elements], fe.grads[:, :, -1])
    res_s = state.z[:, None] - dt_u[:, None] - reaction(uq, roots)
    if prob.source is not None:
        res_s = res_s + fe.evaluate(prob.source)
    res_a = uq - fe.evaluate(prob.target) + dt_p[:, None] - reaction_d1(uq, roots) * pq
    eta2 = h ** 2 * fe.integrate(res_s ** 2 + res_a ** 2)

    D = mesh.dim
    gnorm = np.linalg.norm(fe.grads, axis=2)  # (ne, D+1)
    normals = -fe.grads / gnorm[:, :, None]  # outward normal of facet opposite k
    fmeas = D * fe.vol[:, None] * gnorm  # facet measure
    gx_u = np.einsum("ek,ekd->ed", state.u[mesh.elements], fe.grads[:, :, :-1])
    gx_p = np.einsum("ek,ekd->ed", state.p[mesh.elements], fe.grads[:, :, :-1])
    flux_u = np.einsum("ed,ekd->ek", gx_u, normals[:, :, :-1])
    flux_p = np.einsum("ed,ekd->ek", gx_p, normals[:, :, :-1])
    nf = len(mesh.facets)
    fid = mesh.element_facets.ravel()
    jump_u = np.bincount(fid, weights=flux_u.ravel(), minlength=nf)
    jump_p = np.bincount(fid, weights=flux_p.ravel(), minlength=nf)
    interior = mesh.facet_elements[:, 1] >= 0
    weight = np.where(interior, 0.5, 0.0)
    if prob.bc is BC.NEUMANN:
        bfac = ~interior
        lateral = np.zeros(nf, dtype=bool)
        bidx = np.flatnonzero(bfac)
        lateral[bidx] = mesh.boundary_parts == BoundaryPart.LATERAL
        weight = np.where(lateral, 1.0, weight)
    jump2 = weight * (jump_u ** 2 + jump_p ** 2)
    eta2 = eta2 + h * np.sum(fmeas * jump2[mesh.element_facets], axis=1)
    return np.sqrt(eta2)


def dorfler_mark(eta, theta):
    """Smallest set of elements carrying a fraction ``theta`` of sum eta^2
    (largest indicators first, ties broken by element id)."""
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    e2 = np.asarray(eta, dtype=float) ** 2
    order = np.lexsort((np.arange(len(e2)), -e2))
    csum = np.cumsum(e2[order])
    total = csum[-1]
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    k = int(np.searchsorted(csum, theta * total * (1 - 1e-14))) + 1
    return np.sort(order[:k])


@dataclass
class AdaptiveStep:
    mesh: object
    system: object
    state: object
    report: object
    eta: np.ndarray = None
    marked: np.ndarray = None


def adaptive_solve(problem, mesh, steps, theta=0.5, config=None, solver=None,
                   warm_start=True, callback=None):
    """solve -> estimate -> mark (Doerfler) -> refine, ``steps`` times,
    followed by a final solve on the last mesh."""
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    history = []
    initial = None
    for k in range(steps + 1):
        system = OptimalitySystem(problem, mesh, solver)
        if initial is not None:
            initial = system.make_state(*initial(system))
        try:
            system, state, report = solve(problem, mesh, config, solver,
                                          initial=initial, system=system)
        except NotConverged:
            if initial is None:
                raise
            log.info("warm start failed on step %d; solving from scratch", k)
            system, state, report = solve(problem, mesh, config, solver, system=system)
        step = AdaptiveStep(mesh, system, state, report)
        history.append(step)
        if callback is not None:
            callback(k, step)
        if k == steps:
            break
        step.eta = error_indicator(system, state)
        step.marked = dorfler_mark(step.eta, theta)
        mesh = refine_adaptive(mesh, step.marked)
        if warm_start:
            initial = _warm_start(state)
        else:
            initial = None
    return history


def _warm_start(state):
    def build(system):
        u = prolongate(system.mesh, state.u)
        p = prolongate(system.mesh, state.p)
        fixed = system.fe.constrained(Space.STATE)
        u[fixed] = system.u_fixed[fixed]
        p[system.fe.constrained(Space.ADJOINT)] = 0.0
        return u, p
    return build


def nodal_target(system):
    return interpolate(system.mesh, system.problem.target)


# -- forward problem ---------------------------------------------------------------

def forward_solve(problem, mesh, z=None, solver=None):
    """Solve the state equation alone for an element control ``z`` (zero by
    default).  Returns ``(system, u)``."""
    system = OptimalitySystem(problem, mesh, solver)
    if z is None:
        z = np.zeros(mesh.num_elements)
    return system, system.solve_state(np.asarray(z, dtype=float))


def convergence_study(problem, n0=4, levels=3, solver=None):
    """L2(Q) errors of the forward solve against ``problem.exact`` on a
    structured mesh and ``levels`` uniform refinements of it.

    Returns ``(h, errors, orders)``; ``orders[k]`` compares levels k and k+1.
    """
    if problem.exact is None:
        raise ValueError("problem has no exact solution")
    mesh = build_unit_cylinder(problem.d, n0, problem.T)
    hs, errs = [], []
    for k in range(levels + 1):
        system, u = forward_solve(problem, mesh, solver=solver)
        hs.append(mesh.h)
        errs.append(l2_error(system.fe, u, problem.exact))
        if k < levels:
            mesh = refine_uniform(mesh)
    hs, errs = np.array(hs), np.array(errs)
    orders = np.log(errs[:-1] / errs[1:]) / np.log(hs[:-1] / hs[1:])
    return hs, errs, orders
