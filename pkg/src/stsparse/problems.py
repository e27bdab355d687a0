"""Benchmark problems and manufactured solutions.

Data functions take an array whose last axis holds the coordinates
``(x1, ..., xd, t)``; the initial datum takes the spatial part only.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import sympy

from .control import ControlParams
from .fem import BC

# R(u) = u (u - 0.25) (u + 1)
SCHLOEGL_ROOTS = (-1.0, 0.0, 0.25)


def _zero(x):
    return np.zeros(np.shape(x)[:-1])


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    d: int
    params: ControlParams
    roots: tuple
    target: callable
    u0: callable = _zero
    bc: BC = BC.DIRICHLET
    T: float = 1.0
    source: callable = None
    exact: callable = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        u1, u2, u3 = self.roots
        if not u1 <= u2 <= u3:
            raise ValueError("reaction roots must be ordered u1 <= u2 <= u3")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.d not in (1, 2):
            raise ValueError("only d = 1 and d = 2 are supported")

    def with_params(self, **kw):
        p = self.params
        params = ControlParams(
            rho=kw.pop("rho", p.rho), mu=kw.pop("mu", p.mu),
            a=kw.pop("a", p.a), b=kw.pop("b", p.b))
        return replace(self, params=params, **kw)


# -- Example 1: moving target -------------------------------------------------------

def moving_target(x):
    x = np.asarray(x, dtype=float)
    x1, x2, t = x[..., 0], x[..., 1], x[..., 2]
    # -20 scales the whole squared distance (isotropic bumps)
    return (np.exp(-20.0 * ((x1 - 0.2) ** 2 + (x2 - 0.2) ** 2 + (t - 0.2) ** 2))
            + np.exp(-20.0 * ((x1 - 0.7) ** 2 + (x2 - 0.7) ** 2 + (t - 0.9) ** 2)))


def example1_moving_target(rho=1e-4, mu=0.004, a=-10.0, b=20.0):
    return ProblemSpec(
        name="example1", d=2, params=ControlParams(rho, mu, a, b),
        roots=SCHLOEGL_ROOTS, target=moving_target, u0=_zero, bc=BC.DIRICHLET)


# -- Example 2: turning wave ----------------------------------------------------------

def turning_angle(t):
    return 2.0 * np.pi / 3.0 * np.minimum(0.75, t)


def _logistic(s):
    # 1/(1+exp(s)) without overflow warnings for large |s|
    return 0.5 * (1.0 - np.tanh(0.5 * s))


def turning_wave(x):
    x = np.asarray(x, dtype=float)
    x1, x2, t = x[..., 0], x[..., 1], x[..., 2]
    g = turning_angle(t)
    c, s = np.cos(g), np.sin(g)
    r2 = np.sqrt(2.0)
    first = _logistic((c * (70.0 / 3.0 - 70.0 * x1) + s * (70.0 / 3.0 - 70.0 * x2)) / r2)
    second = _logistic((c * (70.0 * x1 - 140.0 / 3.0) + s * (70.0 * x2 - 140.0 / 3.0)) / r2)
    return first + second - 1.0


def turning_wave_initial(x):
    x = np.asarray(x, dtype=float)
    x1 = x[..., 0]
    r2 = np.sqrt(2.0)
    return (_logistic((70.0 / 3.0 - 70.0 * x1) / r2)
            + _logistic((70.0 * x1 - 140.0 / 3.0) / r2) - 1.0)


def wave_front_distance(x):
    """Spatial distance from ``x`` to the nearer of the two moving fronts of
    the turning-wave target (its 1/2 level lines) at the same time."""
    x = np.asarray(x, dtype=float)
    g = turning_angle(x[..., 2])
    c, s = np.cos(g), np.sin(g)
    proj = c * x[..., 0] + s * x[..., 1]
    level = (c + s) / 3.0
    return np.minimum(np.abs(proj - level), np.abs(proj - 2.0 * level))


def example2_turning_wave(sparse=True, rho=1e-6, mu=None, a=-100.0, b=100.0):
    if mu is None:
        mu = 1e-4 if sparse else 0.0
    return ProblemSpec(
        name="example2", d=2, params=ControlParams(rho, mu, a, b),
        roots=SCHLOEGL_ROOTS, target=turning_wave, u0=turning_wave_initial,
        bc=BC.NEUMANN)


# -- Manufactured solutions ------------------------------------------------------------

def _symbols(d):
    xs = sympy.symbols(" ".join(f"x{i + 1}" for i in range(d)), real=True)
    if d == 1:
        xs = (xs,)
    return tuple(xs), sympy.Symbol("t", real=True)


def _vectorize(expr, xs, t):
    fn = sympy.lambdify((*xs, t), expr, modules="numpy")

    def f(x):
        x = np.asarray(x, dtype=float)
        out = fn(*(x[..., i] for i in range(x.shape[-1])))
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()

    return f


def manufactured_problem(u_exact=None, d=1, roots=(0.0, 0.0, 0.0)):
    """Forward problem with source f = d_t u - Lap_x u + R(u) for a chosen
    smooth ``u_exact`` (a sympy expression in ``x1[, x2], t`` or a string).

    The default is sin(pi x1) sin(pi t) in one space dimension.
    """
    xs, t = _symbols(d)
    if u_exact is None:
        u_exact = sympy.sin(sympy.pi * xs[0]) * sympy.sin(sympy.pi * t)
    expr = sympy.sympify(u_exact, locals={s.name: s for s in (*xs, t)})
    u1, u2, u3 = roots
    f = (sympy.diff(expr, t) - sum(sympy.diff(expr, xi, 2) for xi in xs)
         + (expr - u1) * (expr - u2) * (expr - u3))
    f = sympy.simplify(f)
    return ProblemSpec(
        name="manufactured", d=d, params=ControlParams(1.0, 0.0, -1.0, 1.0),
        roots=tuple(float(r) for r in roots), target=_zero,
        u0=_initial(expr, xs, t),
        bc=BC.DIRICHLET, source=_vectorize(f, xs, t), exact=_vectorize(expr, xs, t),
        options={"u_exact": str(expr), "f": str(f)})


def _initial(expr, xs, t):
    full = _vectorize(expr.subs(t, 0), xs, t)

    def u0(x):
        x = np.asarray(x, dtype=float)
        return full(np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1))

    return u0


PROBLEMS = {
    "example1": example1_moving_target,
    "example2": lambda **kw: example2_turning_wave(sparse=True, **kw),
    "example2-nonsparse": lambda **kw: example2_turning_wave(sparse=False, **kw),
    "manufactured": lambda **kw: manufactured_problem(),
}


def get_problem(name, **overrides):
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**overrides)
