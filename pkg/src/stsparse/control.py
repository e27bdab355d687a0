"""Piecewise-constant controls: projection formula, active sets, objective.

Every routine here is an elementwise map over numpy arrays holding one
value per mesh element.  The control-law functions only read ``rho``,
``mu``, ``a`` and ``b`` from their ``params`` argument, which may therefore
also carry arrays broadcastable against ``pbar`` (one parameter set per
entry).
"""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class ActiveSet(IntEnum):
    """Element labels; the integer values are also the VTK encoding."""

    LOWER = 0  # z = a
    UPPER = 1  # z = b
    ZERO = 2  # z = 0
    INACTIVE_MINUS = 3  # a < z < 0
    INACTIVE_PLUS = 4  # 0 < z < b


@dataclass(frozen=True)
class ControlParams:
    rho: float
    mu: float
    a: float
    b: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not self.mu >= 0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")
        if not self.a < 0 < self.b:
            raise ValueError(f"bounds must satisfy a < 0 < b, got a={self.a}, b={self.b}")


def proj_interval(q, lo, hi):
    """max(lo, min(q, hi)); works on scalars and arrays."""
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError("empty interval")
    return np.maximum(lo, np.minimum(q, hi))


def element_average(mesh, p):
    """Mean value of the P1 function with nodal values ``p`` on each element."""
    return np.asarray(p, dtype=float)[mesh.elements].mean(axis=1)


def recover_lambda(pbar, mu):
    """Subgradient of the L1 term, Proj_[-1,1](-pbar/mu); zero when mu = 0."""
    pbar = np.asarray(pbar, dtype=float)
    if mu == 0:
        return np.zeros_like(pbar)
    return proj_interval(-pbar / mu, -1.0, 1.0)


def _shrink(pbar, mu):
    # pbar + mu*lambda, formed without cancellation so that it is exactly 0
    # whenever |pbar| <= mu
    return np.where(pbar > mu, pbar - mu, np.where(pbar < -mu, pbar + mu, 0.0))


def recover_control(pbar, params):
    """Optimal element control Proj_[a,b](-(pbar + mu lambda)/rho)."""
    pbar = np.asarray(pbar, dtype=float)
    return proj_interval(-_shrink(pbar, params.mu) / params.rho, params.a, params.b)


def _unprojected(pbar, params):
    return -_shrink(pbar, params.mu) / params.rho


def classify_active_sets(pbar, params):
    """Label every element with one of the five cases of the control law.

    The bound tests ``-pbar + mu < rho a`` etc. are evaluated on the quotient
    ``-(pbar - mu)/rho`` that the projection formula also uses, so labels and
    recovered values can never disagree through rounding.
    """
    pbar = np.asarray(pbar, dtype=float)
    w = _unprojected(pbar, params)
    zero = np.abs(pbar) <= params.mu
    labels = np.full(pbar.shape, -1, dtype=np.int8)
    labels[~zero & (w < params.a)] = ActiveSet.LOWER
    labels[~zero & (w > params.b)] = ActiveSet.UPPER
    labels[~zero & (pbar > 0) & (w >= params.a)] = ActiveSet.INACTIVE_MINUS
    labels[~zero & (pbar < 0) & (w <= params.b)] = ActiveSet.INACTIVE_PLUS
    labels[zero] = ActiveSet.ZERO
    if np.any(labels < 0):
        raise RuntimeError("active-set classification is not exhaustive")
    return labels


def five_case_control(pbar, params):
    """The control law written case by case from the active-set labels."""
    pbar = np.asarray(pbar, dtype=float)
    labels = classify_active_sets(pbar, params)
    rho, mu, a, b = (np.broadcast_to(np.asarray(v, dtype=float), pbar.shape)
                     for v in (params.rho, params.mu, params.a, params.b))
    z = np.zeros_like(pbar)
    m = labels == ActiveSet.LOWER
    z[m] = a[m]
    m = labels == ActiveSet.UPPER
    z[m] = b[m]
    m = labels == ActiveSet.INACTIVE_MINUS
    z[m] = -(pbar[m] - mu[m]) / rho[m]
    m = labels == ActiveSet.INACTIVE_PLUS
    z[m] = -(pbar[m] + mu[m]) / rho[m]
    return z


def vi_gap(mesh, pbar, z, lam, params, eps=1e-3):
    """Smallest value of (int_tau pbar + |tau|(rho z + mu lam)) (v - z) over
    the test controls v in {a, 0, b, clip(z +- eps)}, per element.

    Nonnegative (up to rounding) at a solution of the discrete variational
    inequality.
    """
    vol = mesh.element_volumes
    g = vol * (pbar + params.rho * z + params.mu * lam)
    tests = [np.full_like(z, params.a), np.zeros_like(z), np.full_like(z, params.b),
             np.clip(z + eps, params.a, params.b), np.clip(z - eps, params.a, params.b)]
    return np.min([g * (v - z) for v in tests], axis=0)


def inactive_mask(labels, params):
    """Elements where the control depends smoothly on the adjoint.

    For mu = 0 the zero set is only the tie pbar = 0, where the control
    still varies with slope -1/rho; it is counted as inactive there.
    """
    m = (labels == ActiveSet.INACTIVE_MINUS) | (labels == ActiveSet.INACTIVE_PLUS)
    if params.mu == 0:
        m |= labels == ActiveSet.ZERO
    return m


@dataclass(frozen=True)
class Objective:
    total: float
    tracking: float
    tikhonov: float
    l1: float


def evaluate_objective(fe, u, z, target, params):
    """J = 1/2 ||u - u_Q||^2 + rho/2 ||z||^2 + mu ||z||_1.

    ``target`` is a callable evaluated at quadrature points or a nodal
    array interpolating it.
    """
    uq = fe.at_quadrature(u)
    if callable(target):
        tq = fe.evaluate(target)
    else:
        tq = fe.at_quadrature(np.asarray(target, dtype=float))
    tracking = 0.5 * float(fe.integrate((uq - tq) ** 2).sum())
    vol = fe.vol
    tikhonov = 0.5 * params.rho * float(np.sum(vol * z * z))
    l1 = params.mu * float(np.sum(vol * np.abs(z)))
    return Objective(tracking + tikhonov + l1, tracking, tikhonov, l1)


def control_l1_norm(mesh, z):
    return float(np.sum(mesh.element_volumes * np.abs(z)))


def sparsity_fraction(mesh, labels):
    """Measure of the zero set divided by the measure of Q."""
    vol = mesh.element_volumes
    return float(vol[np.asarray(labels) == ActiveSet.ZERO].sum() / vol.sum())


def active_set_counts(labels):
    return {s: int(np.count_nonzero(np.asarray(labels) == s)) for s in ActiveSet}
