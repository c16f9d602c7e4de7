"""Direct solvers for the discrete systems built by the DM and GPDM estimators.

Closed manifolds minimise ||(-a+L)u - f||^2 + gamma ||u||^2 (mean-of-squares
norms, so the 1/N factors cancel). Problems with a Dirichlet boundary stack
the interior rows of the GPDM estimator on top of identity rows at boundary
points and solve that system in the least-squares sense.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr

from .errors import ConfigError, NumericalFailure
from .operator import SparseOperator

DENSE_THRESHOLD = 5000
LSQR_TOL = 1e-14
LSQR_MAX_ITER = 200_000


class SolveMethod(str, Enum):
    DENSE = "DenseLS"
    LSQR = "IterativeLSQR"


@dataclass
class LinearSolveReport:
    solution: np.ndarray
    residual_norm: float  # ||A u - b||_2 / sqrt(rows)
    method: SolveMethod
    iterations: int
    gamma: float
    wall_time_ms: float = 0.0

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("solution")
        out["method"] = self.method.value
        return out

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_solution_csv(self, path) -> None:
        write_solution_csv(self.solution, path)


def write_solution_csv(u, path) -> None:
    with open(path, "w") as fh:
        fh.write("index,u\n")
        for i, v in enumerate(np.asarray(u, float)):
            fh.write(f"{i},{v:.17g}\n")


def read_solution_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].copy()


def _as_csr(op) -> sp.csr_matrix:
    if isinstance(op, SparseOperator):
        return op.matrix
    return sp.csr_matrix(op)


def _pick_method(n: int, method):
    if method is None:
        return SolveMethod.DENSE if n <= DENSE_THRESHOLD else SolveMethod.LSQR
    return SolveMethod(method)


def _least_squares(A: sp.csr_matrix, b: np.ndarray, gamma: float, method: SolveMethod):
    """argmin ||A u - b||^2 + gamma ||u||^2; returns (u, iterations)."""
    n = A.shape[1]
    if method is SolveMethod.DENSE:
        Ad = A.toarray()
        if gamma > 0 or A.shape[0] != n:
            M = Ad.T @ Ad
            M[np.diag_indices(n)] += gamma
            try:
                u = sla.solve(M, Ad.T @ b, assume_a="pos")
            except (sla.LinAlgError, ValueError) as exc:
                raise NumericalFailure(f"normal equations failed: {exc}") from exc
        else:
            try:
                u = sla.solve(Ad, b)
            except (sla.LinAlgError, ValueError) as exc:
                raise NumericalFailure(f"square solve failed: {exc}") from exc
        return u, 1
    res = lsqr(A, b, damp=float(np.sqrt(gamma)), atol=LSQR_TOL, btol=LSQR_TOL,
               iter_lim=LSQR_MAX_ITER)
    u, istop, itn, r1norm = res[0], res[1], res[2], res[3]
    if istop in (0, 7) or not np.all(np.isfinite(u)):
        raise NumericalFailure("LSQR did not converge", iterations=int(itn), residual=float(r1norm))
    return u, int(itn)


def _report(A, b, u, method, iterations, gamma, t0) -> LinearSolveReport:
    if not np.all(np.isfinite(u)):
        raise NumericalFailure("non-finite solution")
    r = A @ u - b
    res = float(np.linalg.norm(r) / np.sqrt(len(b)))
    return LinearSolveReport(u, res, method, iterations, float(gamma), (time.perf_counter() - t0) * 1e3)


def closed_system(L, a, n: int) -> sp.csr_matrix:
    """The matrix -diag(a) + L as CSR."""
    A = _as_csr(L)
    a = np.broadcast_to(np.asarray(a, float), (n,))
    return (A - sp.diags(a)).tocsr()


def solve_closed(L, a, f, gamma: float, method=None) -> LinearSolveReport:
    """Regularised least squares for (-a + L) u = f on a closed manifold."""
    t0 = time.perf_counter()
    A0 = _as_csr(L)
    n = A0.shape[0]
    if A0.shape != (n, n):
        raise ConfigError(f"square operator expected, got {A0.shape}")
    f = np.asarray(f, float)
    if f.shape != (n,):
        raise ConfigError(f"f has shape {f.shape}, expected ({n},)")
    a_vec = np.broadcast_to(np.asarray(a, float), (n,))
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    if gamma == 0 and not np.any(a_vec != 0):
        raise ConfigError("gamma > 0 is required when a == 0")
    A = closed_system(A0, a_vec, n)
    m = _pick_method(n, method)
    u, its = _least_squares(A, f, gamma, m)
    return _report(A, f, u, m, its, gamma, t0)


def dirichlet_system(L_interior, boundary_index, n: int, a_interior=0.0) -> sp.csr_matrix:
    """Interior rows (-a + L_interior) stacked on identity rows at the boundary."""
    Li = _as_csr(L_interior)
    boundary_index = np.asarray(boundary_index, dtype=np.int64)
    if Li.shape[1] != n or Li.shape[0] + boundary_index.size != n:
        raise ConfigError(f"interior block {Li.shape} inconsistent with {boundary_index.size} "
                          f"boundary rows and {n} unknowns")
    rest = np.setdiff1d(np.arange(n), boundary_index)
    a_int = np.broadcast_to(np.asarray(a_interior, float), (Li.shape[0],))
    shift = sp.csr_matrix((-a_int, (np.arange(Li.shape[0]), rest)), shape=Li.shape)
    eye = sp.csr_matrix((np.ones(boundary_index.size), (np.arange(boundary_index.size), boundary_index)),
                        shape=(boundary_index.size, n))
    return sp.vstack([Li + shift, eye], format="csr")


def solve_dirichlet(gp, a, f_interior, g_boundary, method=None, gamma: float = 0.0) -> LinearSolveReport:
    """Solve the GPDM interior equations together with u = g at boundary points.

    ``gp`` is a :class:`GpdmOperator`; ``a`` is a scalar or a vector over the
    interior rows.
    """
    t0 = time.perf_counter()
    n = gp.n_points
    f_interior = np.asarray(f_interior, float)
    g_boundary = np.asarray(g_boundary, float)
    if f_interior.shape != (len(gp.interior_index),) or g_boundary.shape != (len(gp.boundary_index),):
        raise ConfigError("f must cover the interior rows and g the boundary points")
    A = dirichlet_system(gp.L_interior, gp.boundary_index, n, a)
    b = np.concatenate([f_interior, g_boundary])
    m = _pick_method(n, method)
    u, its = _least_squares(A, b, gamma, m)
    return _report(A, b, u, m, its, gamma, t0)
