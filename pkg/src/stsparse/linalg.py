"""Sparse linear solvers: restarted right-preconditioned GMRES, ILU(0) and a
direct LU fallback.

Matrices are ``scipy.sparse`` CSR arrays; the Krylov solver and the
incomplete factorisation are implemented here.
"""

from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    pass


class Breakdown(SolverError):
    pass


class MaxIterationsExceeded(SolverError):
    def __init__(self, msg, x=None, history=None):
        super().__init__(msg)
        self.x = x
        self.history = history


class SingularPreconditioner(SolverError):
    pass


class ZeroPivot(SingularPreconditioner):
    pass


class SingularMatrix(SolverError):
    pass


PRECONDITIONERS = ("auto", "none", "ilu0", "direct")


@dataclass
class SolverConfig:
    reduction: float = 1e-6
    restart: int = 100
    maxiter: int = 5000
    preconditioner: str = "auto"
    direct_threshold: int = 20000

    def __post_init__(self):
        if not 0.0 < self.reduction < 1.0:
            raise ValueError("reduction must lie in (0, 1)")
        if self.restart < 1:
            raise ValueError("restart must be >= 1")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class SolveInfo:
    method: str
    iterations: int
    reduction: float
    history: list = field(default_factory=list)


# -- GMRES -----------------------------------------------------------------------

def _as_matvec(A):
    if callable(A) and not hasattr(A, "shape"):
        return A
    return lambda v: A @ v


def gmres(A, b, M=None, x0=None, rtol=1e-6, restart=100, maxiter=5000):
    """Restarted GMRES with right preconditioning.

    ``M`` applies the approximate inverse.  Convergence is declared when the
    true residual satisfies ``||b - A x|| <= rtol ||b||``.  Returns
    ``(x, iterations, achieved_reduction, history)`` where ``history`` holds
    the (Arnoldi) residual norm after every inner iteration, starting with
    the initial one.
    """
    matvec = _as_matvec(A)
    precond = (lambda v: v) if M is None else M
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0, [0.0]
    target = rtol * bnorm
    r = b - matvec(x)
    beta = np.linalg.norm(r)
    history = [beta]
    its = 0
    m = min(restart, n)
    while beta > target:
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        Z = np.zeros((m, n))
        k = 0
        while k < m and its < maxiter:
            Z[k] = precond(V[k])
            if not np.all(np.isfinite(Z[k])):
                raise SingularPreconditioner("preconditioner produced non-finite values")
            w = matvec(Z[k])
            # modified Gram-Schmidt with one reorthogonalisation pass
            for _ in range(2):
                for j in range(k + 1):
                    hj = V[j] @ w
                    H[j, k] += hj
                    w -= hj * V[j]
            H[k + 1, k] = np.linalg.norm(w)
            for j in range(k):
                t = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            if denom == 0.0:
                raise Breakdown("GMRES breakdown: singular Hessenberg matrix")
            cs[k] = H[k, k] / denom
            sn[k] = H[k + 1, k] / denom
            hk1 = H[k + 1, k]
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            its += 1
            k += 1
            history.append(abs(g[k]))
            if abs(g[k]) <= target:
                break
            if hk1 <= 1e-14 * denom:
                break  # happy breakdown: the Krylov space is invariant
            V[k] = w / hk1
        y = np.linalg.solve(np.triu(H[:k, :k]), g[:k]) if k else np.zeros(0)
        x += Z[:k].T @ y
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        if beta <= target:
            break
        if its >= maxiter:
            raise MaxIterationsExceeded(
                f"GMRES did not reach reduction {rtol:g} in {maxiter} iterations "
                f"(achieved {beta / bnorm:.3e})", x=x, history=history)
    return x, its, beta / bnorm, history


# -- ILU(0) ----------------------------------------------------------------------

@numba.njit(cache=True)
def _ilu0_factor(indptr, indices, data, n):
    a = data.copy()
    diag = np.empty(n, dtype=np.int64)
    marker = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        diag[i] = -1
        for kk in range(indptr[i], indptr[i + 1]):
            if indices[kk] == i:
                diag[i] = kk
        if diag[i] < 0:
            return a, diag, i
    for i in range(n):
        for kk in range(indptr[i], indptr[i + 1]):
            marker[indices[kk]] = kk
        for kk in range(indptr[i], diag[i]):
            k = indices[kk]
            piv = a[diag[k]]
            if piv == 0.0:
                return a, diag, k
            a[kk] /= piv
            lik = a[kk]
            for jj in range(diag[k] + 1, indptr[k + 1]):
                pos = marker[indices[jj]]
                if pos >= 0:
                    a[pos] -= lik * a[jj]
        for kk in range(indptr[i], indptr[i + 1]):
            marker[indices[kk]] = -1
        if a[diag[i]] == 0.0:
            return a, diag, i
    return a, diag, -1


@numba.njit(cache=True)
def _ilu0_apply(indptr, indices, a, diag, r):
    n = r.shape[0]
    y = r.copy()
    for i in range(n):
        s = y[i]
        for kk in range(indptr[i], diag[i]):
            s -= a[kk] * y[indices[kk]]
        y[i] = s
    for i in range(n - 1, -1, -1):
        s = y[i]
        for kk in range(diag[i] + 1, indptr[i + 1]):
            s -= a[kk] * y[indices[kk]]
        y[i] = s / a[diag[i]]
    return y


class ILU0:
    """Incomplete LU factorisation without fill-in.

    ``L`` (unit lower) and ``U`` share the sparsity pattern of the input.
    Calling the object solves ``L U z = r``.
    """

    def __init__(self, A):
        A = sp.csr_matrix(A, dtype=float)
        A.sum_duplicates()
        A.sort_indices()
        n = A.shape[0]
        if A.shape[1] != n:
            raise ValueError("ILU0 needs a square matrix")
        self.indptr = A.indptr.astype(np.int64)
        self.indices = A.indices.astype(np.int64)
        a, diag, bad = _ilu0_factor(self.indptr, self.indices, A.data, n)
        if bad >= 0:
            raise ZeroPivot(f"zero pivot in ILU0 at row {bad}")
        self.data = a
        self.diag = diag
        self.shape = A.shape

    def __call__(self, r):
        return _ilu0_apply(self.indptr, self.indices, self.data, self.diag,
                           np.ascontiguousarray(r, dtype=float))

    def factors(self):
        """Explicit (L, U) as CSR matrices, mainly for testing."""
        M = sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)
        L = sp.tril(M, k=-1, format="csr") + sp.identity(self.shape[0], format="csr")
        U = sp.triu(M, format="csr")
        return L, U


def ilu0_factor(A):
    return ILU0(A)


# -- direct ------------------------------------------------------------------------

def direct_solve(A, b, refine=2):
    """Sparse LU solve with a couple of steps of iterative refinement."""
    A = sp.csc_matrix(A, dtype=float)
    b = np.asarray(b, dtype=float)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SingularMatrix(str(exc)) from None
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SingularMatrix("LU solve produced non-finite values")
    bnorm = np.linalg.norm(b)
    for _ in range(refine):
        r = b - A @ x
        if np.linalg.norm(r) <= 1e-14 * bnorm:
            break
        x += lu.solve(r)
    return x


def gmres_solve(A, b, config=None, preconditioner=None):
    """GMRES under a :class:`SolverConfig`; ``preconditioner`` overrides
    ``config.preconditioner`` ("none" or "ilu0").  Returns
    ``(x, iterations, achieved_reduction)``."""
    config = config or SolverConfig()
    kind = preconditioner or config.preconditioner
    if kind in ("auto", "direct"):
        kind = "ilu0"
    M = ILU0(A) if kind == "ilu0" else None
    x, its, red, _ = gmres(A, b, M=M, rtol=config.reduction,
                           restart=config.restart, maxiter=config.maxiter)
    return x, its, red


def solve_linear(A, b, config=None):
    """Solve ``A x = b`` according to ``config`` and check that the residual
    reduction demanded by the configuration was achieved."""
    config = config or SolverConfig()
    A = sp.csr_matrix(A)
    n = A.shape[0]
    kind = config.preconditioner
    if kind == "auto":
        kind = "direct" if n <= config.direct_threshold else "ilu0"
    bnorm = np.linalg.norm(b)
    if kind == "direct":
        x = direct_solve(A, b)
        red = np.linalg.norm(b - A @ x) / bnorm if bnorm > 0 else 0.0
        if not red <= config.reduction:
            raise SolverError(f"direct solve reached only reduction {red:.3e}")
        return x, SolveInfo("direct", 0, red)
    M = ILU0(A) if kind == "ilu0" else None
    x, its, red, hist = gmres(A, b, M=M, rtol=config.reduction,
                              restart=config.restart, maxiter=config.maxiter)
    return x, SolveInfo(f"gmres-{kind}", its, red, hist)
