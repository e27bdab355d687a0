"""Fixed symmetric quadrature rules on the reference simplex.

Points are given in barycentric coordinates and weights are normalised so
that they sum to one; an integral over a physical simplex is therefore
``volume * sum(w * f(points))``.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, D+1) barycentric coordinates
    weights: np.ndarray  # (nq,), sum to 1
    degree: int

    @property
    def size(self):
        return len(self.weights)


def _orbit_3(a):
    b = 1.0 - 2.0 * a
    return [(a, a, b), (a, b, a), (b, a, a)]


def _orbit_4(a):
    b = 1.0 - 3.0 * a
    pts = []
    for k in range(4):
        p = [a] * 4
        p[k] = b
        pts.append(tuple(p))
    return pts


def _orbit_22(a):
    b = 0.5 - a
    pts = []
    for i, j in combinations(range(4), 2):
        p = [a] * 4
        p[i] = b
        p[j] = b
        pts.append(tuple(p))
    return pts


def _triangle_degree4():
    # 6-point rule (Strang-Fix / Dunavant)
    a1, w1 = 0.44594849091596488632, 0.22338158967801146570
    a2, w2 = 0.091576213509770743460, 0.10995174365532186764
    pts = _orbit_3(a1) + _orbit_3(a2)
    wts = [w1] * 3 + [w2] * 3
    return QuadratureRule(np.array(pts), np.array(wts), 4)


def _tetrahedron_degree5():
    # 14-point rule with positive weights, exact to degree 5
    a1, w1 = 0.09273525031089164, 0.07349304311636255
    a2, w2 = 0.3108859192633005, 0.11268792571801703
    a3, w3 = 0.04550370412564798, 0.04254602077708027
    pts = _orbit_4(a1) + _orbit_4(a2) + _orbit_22(a3)
    wts = [w1] * 4 + [w2] * 4 + [w3] * 6
    return QuadratureRule(np.array(pts), np.array(wts), 5)


_RULES = {
    2: _triangle_degree4(),
    3: _tetrahedron_degree5(),
}


def simplex_rule(dim):
    """Return the production rule (exact at least to degree 4) for a
    simplex of topological dimension ``dim`` (2 or 3)."""
    try:
        return _RULES[dim]
    except KeyError:
        raise ValueError(f"no quadrature rule for simplex dimension {dim}") from None
