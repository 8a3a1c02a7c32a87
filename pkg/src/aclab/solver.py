"""Newton solvers and direct banded linear algebra.

All model Hessians and Jacobians in this package are banded up to a small
periodic wrap block.  :func:`banded_solve` peels the wrap entries off as a
low-rank correction (Woodbury), factors the remaining band directly
(Cholesky when symmetric positive definite, LU otherwise) and verifies the
residual; it falls back to a sparse LU only if the band path misbehaves.
Everything is deterministic: identical inputs produce identical iterates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonconvergenceError, NumericalError

__all__ = ["NewtonConfig", "SolveReport", "banded_solve", "newton_minimize", "newton_root"]


@dataclass
class NewtonConfig:
    """Termination and line-search parameters for the Newton loops.

    Iteration stops when the residual sup-norm drops below
    ``max(tol, rtol * initial_residual)``; the relative part keeps solves
    from chasing the floating-point floor of large-scale systems.
    """

    tol: float = 1e-10          # sup-norm of gradient / residual
    max_iter: int = 50
    ls_backtrack: float = 0.5
    ls_c1: float = 1e-4
    ls_max_steps: int = 40
    rtol: float = 1e-12

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    def threshold(self, initial_residual: float) -> float:
        return max(self.tol, self.rtol * initial_residual)


@dataclass
class SolveReport:
    iterations: int
    final_residual_norm: float
    energy: float | None
    converged: bool
    wall_time: float


# ---------------------------------------------------------------------------
# banded direct solve with periodic wrap correction
# ---------------------------------------------------------------------------

def _band_and_corners(A):
    """Split a sparse square matrix into band entries and periodic-wrap entries.

    Entries with |i - j| > n/2 couple opposite ends of the index range; they
    are returned separately so the remaining matrix has a genuine band.
    """
    A = sp.coo_matrix(A)
    n = A.shape[0]
    d = A.row - A.col
    wrap = np.abs(d) > n // 2
    return A, n, wrap


def _to_bands(rows, cols, vals, n, l, u):
    ab = np.zeros((l + u + 1, n))
    ab[u + rows - cols, cols] = 0.0  # touch for shape errors early
    np.add.at(ab, (u + rows - cols, cols), vals)
    return ab


def _is_symmetric(A: sp.spmatrix, tol: float = 0.0) -> bool:
    d = (A - A.T).tocoo()
    if d.nnz == 0:
        return True
    return np.max(np.abs(d.data)) <= tol


def banded_solve(A, b):
    """Solve ``A x = b`` for a banded matrix with optional periodic corners.

    ``A`` may be dense or any scipy sparse matrix; ``b`` may have multiple
    columns.  Raises :class:`NumericalError` on singularity.
    """
    if not sp.issparse(A):
        A = sp.csr_matrix(np.asarray(A, dtype=float))
    A = A.tocsr()
    n, m = A.shape
    if n != m:
        raise NumericalError(f"matrix must be square, got {A.shape}")
    b = np.asarray(b, dtype=float)
    if b.shape[0] != n:
        raise NumericalError("right-hand side has wrong length")

    if n <= 3:
        try:
            return np.linalg.solve(A.toarray(), b)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular matrix") from exc

    coo, n, wrap = _band_and_corners(A)
    rows, cols, vals = coo.row[~wrap], coo.col[~wrap], coo.data[~wrap]
    wr, wc, wv = coo.row[wrap], coo.col[wrap], coo.data[wrap]

    if rows.size == 0:
        raise NumericalError("matrix has no band part")
    l = max(int(np.max(rows - cols)), 0)
    u = max(int(np.max(cols - rows)), 0)

    # dense-ish band: no benefit from the banded path
    if l + u + 1 > max(n // 2, 3):
        return _sparse_lu_solve(A, b)

    try:
        ab = _to_bands(rows, cols, vals, n, l, u)
        band = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        symmetric = wr.size == 0 and _is_symmetric(A)

        def band_solve(rhs):
            if symmetric:
                try:
                    # Cholesky path for symmetric positive definite bands
                    ab_low = np.zeros((l + 1, n))
                    for k in range(l + 1):
                        ab_low[k, :] = ab[u + k, :]
                    return sla.solveh_banded(ab_low, rhs, lower=True)
                except np.linalg.LinAlgError:
                    pass
            return sla.solve_banded((l, u), ab, rhs)

        if wr.size == 0:
            x = band_solve(b)
        else:
            # Woodbury: A = B + W E_J^T with J the wrapped columns
            J = np.unique(wc)
            k = J.size
            col_of = {int(c): i for i, c in enumerate(J)}
            W = np.zeros((n, k))
            for r, c, v in zip(wr, wc, wv):
                W[r, col_of[int(c)]] += v
            rhs = np.concatenate([b.reshape(n, -1), W], axis=1)
            sol = band_solve(rhs)
            nb = b.reshape(n, -1).shape[1]
            y, Z = sol[:, :nb], sol[:, nb:]
            small = np.eye(k) + Z[J, :]
            try:
                p = np.linalg.solve(small, y[J, :])
            except np.linalg.LinAlgError as exc:
                raise NumericalError("singular wrap correction") from exc
            x = y - Z @ p
            x = x.reshape(b.shape)
    except np.linalg.LinAlgError:
        return _sparse_lu_solve(A, b)

    # verify; fall back to sparse LU if the band path lost accuracy
    resid = np.linalg.norm(A @ x - b)
    scale = np.linalg.norm(b) + 1.0
    if not np.isfinite(resid) or resid > 1e-8 * scale:
        return _sparse_lu_solve(A, b)
    return x


def _sparse_lu_solve(A, b):
    try:
        lu = spla.splu(A.tocsc())
        x = lu.solve(b)
    except (RuntimeError, ValueError) as exc:
        raise NumericalError(f"sparse factorization failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericalError("singular matrix")
    return x


# ---------------------------------------------------------------------------
# Newton iterations
# ---------------------------------------------------------------------------

def _shifted(H, tau):
    return H + tau * sp.identity(H.shape[0], format="csr")


def newton_minimize(energy, gradient, hessian, x0, config: NewtonConfig):
    """Minimize a smooth objective with analytic gradient and Hessian.

    Newton direction with one diagonal-shift retry on indefiniteness,
    Armijo backtracking on the objective.  Returns ``(x, SolveReport)``.
    """
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    g = np.asarray(gradient(x))
    res = float(np.max(np.abs(g))) if g.size else 0.0
    stop = config.threshold(res)
    it = 0
    while res > stop:
        if it >= config.max_iter:
            report = SolveReport(it, res, float(energy(x)), False,
                                 time.perf_counter() - t0)
            raise NonconvergenceError("Newton iteration budget exhausted",
                                      best_x=x, report=report)
        H = sp.csr_matrix(hessian(x))
        try:
            p = banded_solve(H, -g)
        except NumericalError:
            p = None
        if p is None or np.dot(p, g) >= 0.0:
            tau = 1e-8 * max(1.0, np.abs(H.diagonal()).max())
            shifted_ok = False
            for _ in range(40):
                try:
                    p = banded_solve(_shifted(H, tau), -g)
                except NumericalError:
                    p = None
                if p is not None and np.dot(p, g) < 0.0:
                    shifted_ok = True
                    break
                tau *= 10.0
            if not shifted_ok:
                report = SolveReport(it, res, float(energy(x)), False,
                                     time.perf_counter() - t0)
                raise NonconvergenceError("indefinite Hessian", best_x=x,
                                          report=report)
        # Armijo backtracking
        e0 = float(energy(x))
        slope = float(np.dot(g, p))
        t = 1.0
        for _ in range(config.ls_max_steps):
            x_new = x + t * p
            if float(energy(x_new)) <= e0 + config.ls_c1 * t * slope:
                break
            t *= config.ls_backtrack
        else:
            report = SolveReport(it, res, e0, False, time.perf_counter() - t0)
            raise NonconvergenceError("line search failed", best_x=x,
                                      report=report)
        x = x_new
        g = np.asarray(gradient(x))
        res = float(np.max(np.abs(g))) if g.size else 0.0
        it += 1
    report = SolveReport(it, res, float(energy(x)), True,
                         time.perf_counter() - t0)
    return x, report


def newton_root(residual, jacobian, x0, config: NewtonConfig):
    """Solve ``residual(x) = 0`` with damped Newton on a nonsymmetric Jacobian."""
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    r = np.asarray(residual(x))
    res = float(np.max(np.abs(r))) if r.size else 0.0
    stop = config.threshold(res)
    it = 0
    while res > stop:
        if it >= config.max_iter:
            report = SolveReport(it, res, None, False, time.perf_counter() - t0)
            raise NonconvergenceError("Newton iteration budget exhausted",
                                      best_x=x, report=report)
        J = sp.csr_matrix(jacobian(x))
        p = banded_solve(J, -r)
        nrm0 = float(np.linalg.norm(r))
        t = 1.0
        for _ in range(config.ls_max_steps):
            x_new = x + t * p
            r_new = np.asarray(residual(x_new))
            if float(np.linalg.norm(r_new)) <= (1.0 - config.ls_c1 * t) * nrm0:
                break
            t *= config.ls_backtrack
        else:
            report = SolveReport(it, res, None, False, time.perf_counter() - t0)
            raise NonconvergenceError("residual backtracking failed",
                                      best_x=x, report=report)
        x, r = x_new, r_new
        res = float(np.max(np.abs(r))) if r.size else 0.0
        it += 1
    report = SolveReport(it, res, None, True, time.perf_counter() - t0)
    return x, report
