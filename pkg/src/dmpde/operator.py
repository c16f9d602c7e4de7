"""Diffusion-maps estimator of div_g(kappa grad_g .) on point clouds.

The estimator is a graph-Laplacian-like matrix ``L = W - D`` with

    W_ij = eps^(-d/2-1) N^-1 h(|x_i - x_j|^2 / eps) sqrt(kappa_i kappa_j) / Q_j
    Q_i  = eps^(-d/2) N^-1 sum_j h(|x_i - x_j|^2 / (4 eps))
    h(s) = exp(-s/4) / (4 pi)^(d/2)

and ``D`` the diagonal of row sums of ``W``, so every row of ``L`` sums to
zero. Kernel sums are truncated to k nearest neighbors.

Two forms of ``W`` are available. ``form="graph"`` is the expression above.
``form="row"`` normalizes each row by the kernel-weighted mass of sqrt(kappa),

    W_ij = kappa_i K_ij sqrt(kappa_j) / (eps Q_j S_i),   S_i = sum_l K_il sqrt(kappa_l) / Q_l,

i.e. ``L u = kappa ((G sqrt(kappa))^-1 G(sqrt(kappa) u) - u) / eps``. Both are
consistent for div_g(kappa grad_g .); they differ at O(eps). The row form is
self-adjoint for the weights ``S_i / (sqrt(kappa_i) Q_i)`` instead of ``1/Q_i``.

The divisors inside ``h`` are controlled by ``bandwidth_convention``:

==============  ==========  ==========
convention      W divisor   Q divisor
==============  ==========  ==========
``mixed``       eps         4 eps
``uniform4``    4 eps       4 eps
``uniform1``    eps         eps
==============  ==========  ==========
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericalFailure
from .neighbors import NeighborTable, knn, squared_distances

BANDWIDTH_CONVENTIONS = {"mixed": (1.0, 4.0), "uniform4": (4.0, 4.0), "uniform1": (1.0, 1.0)}
FORMS = ("row", "graph")
DEFAULT_CONVENTION = "uniform1"
DEFAULT_FORM = "row"

# kernel values below this fraction of h(0) are dropped from W
DROP_RELATIVE = 1e-15


class SymmetryTag(str, Enum):
    GENERAL = "General"
    GRAPH_LAPLACIAN_LIKE = "GraphLaplacianLike"


@dataclass(frozen=True)
class SparseOperator:
    """Immutable CSR matrix with sorted column indices."""

    matrix: sp.csr_matrix
    symmetry_tag: SymmetryTag = SymmetryTag.GENERAL

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=float)
        m.sum_duplicates()
        m.sort_indices()
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_triplets(cls, n_rows, n_cols, rows, cols, vals, tag=SymmetryTag.GENERAL):
        m = sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()
        return cls(m, tag)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    @property
    def entries(self):
        """(rows, cols, values) sorted row-major."""
        coo = self.matrix.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data.copy()

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def rows(self, index) -> "SparseOperator":
        return SparseOperator(self.matrix[np.asarray(index)], SymmetryTag.GENERAL)

    def __matmul__(self, v):
        return apply(self, v)

    def save(self, path) -> None:
        """Write ``n_rows n_cols nnz`` then one ``row col value`` line per entry."""
        r, c, v = self.entries
        with open(path, "w") as fh:
            fh.write(f"{self.n_rows} {self.n_cols} {len(v)}\n")
            for ri, ci, vi in zip(r, c, v):
                fh.write(f"{ri} {ci} {vi:.17g}\n")

    @classmethod
    def load(cls, path, tag=SymmetryTag.GENERAL) -> "SparseOperator":
        with open(path) as fh:
            n_rows, n_cols, nnz = (int(t) for t in fh.readline().split())
            body = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
        return cls.from_triplets(n_rows, n_cols, body[:, 0].astype(np.int64),
                                 body[:, 1].astype(np.int64), body[:, 2], tag)


@dataclass(frozen=True)
class DensityEstimate:
    Q: np.ndarray
    epsilon: float
    d: int


def kernel_h(s, d: int):
    """h(s) = exp(-s/4) / (4 pi)^(d/2)."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ConfigError("kernel argument must be non-negative")
    return np.exp(-s / 4.0) / (4.0 * np.pi) ** (d / 2.0)


def _divisors(convention: str):
    try:
        return BANDWIDTH_CONVENTIONS[convention]
    except KeyError:
        raise ConfigError(f"unknown bandwidth convention {convention!r}") from None


def _check_eps(epsilon):
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")


def estimate_density(neighbors: NeighborTable, epsilon: float, d: int, n_total: int | None = None,
                     convention: str = DEFAULT_CONVENTION) -> DensityEstimate:
    """Kernel density Q_i over the kNN set of each point plus the point itself."""
    _check_eps(epsilon)
    n = neighbors.indices.shape[0] if n_total is None else n_total
    _, q_div = _divisors(convention)
    s = neighbors.squared_distances / (q_div * epsilon)
    total = kernel_h(0.0, d) + kernel_h(s, d).sum(axis=1)
    Q = epsilon ** (-d / 2.0) * total / n
    bad = np.flatnonzero(~(np.isfinite(Q) & (Q > 0)))
    if bad.size:
        raise NumericalFailure(f"density estimate not positive/finite at index {bad[0]}", index=int(bad[0]))
    return DensityEstimate(Q, float(epsilon), d)


def _union_edges(neighbors: NeighborTable, n_rows: int, graph: str):
    """Directed edge list (i -> j) restricted to rows < n_rows, self excluded."""
    n, k = neighbors.indices.shape
    i = np.repeat(np.arange(n), k)
    j = neighbors.indices.ravel()
    if graph == "union":
        i, j = np.concatenate([i, j]), np.concatenate([j, i])
    elif graph != "directed":
        raise ConfigError(f"unknown graph mode {graph!r}")
    keep = i < n_rows
    i, j = i[keep], j[keep]
    edges = np.unique(np.column_stack([i, j]), axis=0)
    return edges[:, 0], edges[:, 1]


@dataclass(frozen=True)
class Assembly:
    """An assembled estimator with the by-products needed for diagnostics."""

    operator: SparseOperator
    density: DensityEstimate
    neighbors: NeighborTable
    # L is self-adjoint and negative semi-definite in sum_i weights_i u_i v_i (square case)
    weights: np.ndarray


def _check_form(form):
    if form not in FORMS:
        raise ConfigError(f"unknown estimator form {form!r}")


def _weights(hval, i, j, n_rows, kappa, Q, epsilon, d, n, form):
    """Off-diagonal W values for edges (i, j), plus self-adjointness weights of the rows."""
    if form == "graph":
        w = epsilon ** (-d / 2.0 - 1.0) / n * hval * np.sqrt(kappa[i] * kappa[j]) / Q[j]
        return w, 1.0 / Q[:n_rows]
    sk = np.sqrt(kappa)
    num = hval * sk[j] / Q[j]
    mass = np.bincount(i, weights=num, minlength=n_rows) + kernel_h(0.0, d) * sk[:n_rows] / Q[:n_rows]
    w = kappa[i] * num / (epsilon * mass[i])
    return w, mass / (sk[:n_rows] * Q[:n_rows])


def assemble_kernel_operator(points, n_rows: int, kappa, epsilon: float, d: int, k: int | None = None,
                             convention: str = DEFAULT_CONVENTION, form: str = DEFAULT_FORM,
                             graph: str = "union", neighbors: NeighborTable | None = None) -> Assembly:
    """Rectangular W - D estimator: rows are the first ``n_rows`` points, columns all points.

    Every row sums to zero. The kNN graph, the density and the row masses are
    all taken over the full column set.
    """
    _check_eps(epsilon)
    _check_form(form)
    points = np.asarray(points, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    n = points.shape[0]
    if kappa.shape != (n,):
        raise ConfigError(f"kappa has shape {kappa.shape}, expected ({n},)")
    if np.any(~(kappa > 0)):
        raise ConfigError("kappa must be strictly positive")
    if not 0 <= n_rows <= n:
        raise ConfigError(f"n_rows={n_rows} outside [0, {n}]")
    if neighbors is None:
        if k is None:
            raise ConfigError("pass either k or a neighbor table")
        neighbors = knn(points, k)
    density = estimate_density(neighbors, epsilon, d, n_total=n, convention=convention)
    w_div, _ = _divisors(convention)

    i, j = _union_edges(neighbors, n_rows, graph)
    hval = kernel_h(squared_distances(points[i], points[j]) / (w_div * epsilon), d)
    keep = hval >= DROP_RELATIVE * kernel_h(0.0, d)
    i, j, hval = i[keep], j[keep], hval[keep]
    w, weights = _weights(hval, i, j, n_rows, kappa, density.Q, epsilon, d, n, form)
    W = sp.csr_matrix((w, (i, j)), shape=(n_rows, n))
    W.sort_indices()
    diag = -np.asarray(W.sum(axis=1)).ravel()
    L = W + sp.csr_matrix((diag, (np.arange(n_rows), np.arange(n_rows))), shape=(n_rows, n))
    tag = SymmetryTag.GRAPH_LAPLACIAN_LIKE if n_rows == n else SymmetryTag.GENERAL
    return Assembly(SparseOperator(L, tag), density, neighbors, weights)


def assemble_L(cloud, kappa, epsilon: float, d: int | None = None, k: int | None = None,
               neighbors: NeighborTable | None = None, convention: str = DEFAULT_CONVENTION,
               form: str = DEFAULT_FORM, graph: str = "union") -> SparseOperator:
    """Square diffusion-maps operator L_eps for a closed-manifold cloud."""
    points = np.asarray(getattr(cloud, "points", cloud))
    if d is None:
        d = cloud.d
    return assemble_kernel_operator(points, points.shape[0], kappa, epsilon, d, k, convention,
                                    form, graph, neighbors).operator


def assemble_L_dense(points, kappa, epsilon: float, d: int, convention: str = DEFAULT_CONVENTION,
                     form: str = DEFAULT_FORM) -> np.ndarray:
    """All-pairs dense assembly, used as an oracle for the sparse path."""
    _check_form(form)
    points = np.asarray(points, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    n = points.shape[0]
    w_div, q_div = _divisors(convention)
    d2 = squared_distances(points[:, None, :], points[None, :, :])
    Q = epsilon ** (-d / 2.0) * kernel_h(d2 / (q_div * epsilon), d).sum(axis=1) / n
    K = kernel_h(d2 / (w_div * epsilon), d)
    if form == "graph":
        W = epsilon ** (-d / 2.0 - 1.0) / n * K * np.sqrt(np.outer(kappa, kappa)) / Q[None, :]
    else:
        P = K * np.sqrt(kappa)[None, :] / Q[None, :]
        W = kappa[:, None] * P / (epsilon * P.sum(axis=1, keepdims=True))
    np.fill_diagonal(W, 0.0)
    return W - np.diag(W.sum(axis=1))


def shift(L: SparseOperator, a) -> SparseOperator:
    """-diag(a) + L; ``a`` may be a scalar or a vector over the rows."""
    a = np.broadcast_to(np.asarray(a, dtype=float), (L.n_rows,)) if np.ndim(a) == 0 else np.asarray(a, float)
    if a.shape != (L.n_rows,):
        raise ConfigError(f"shift vector has length {a.shape[0]}, operator has {L.n_rows} rows")
    if L.n_rows > L.n_cols:
        raise ConfigError("shift needs n_rows <= n_cols")
    A = sp.diags(-a, 0, shape=(L.n_rows, L.n_cols), format="csr")
    return SparseOperator(L.matrix + A, SymmetryTag.GENERAL)


def apply(op: SparseOperator, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[0] != op.n_cols:
        raise ConfigError(f"vector length {v.shape[0]} does not match {op.n_cols} columns")
    return op.matrix @ v


def identity(n: int) -> SparseOperator:
    return SparseOperator(sp.identity(n, format="csr"))


def q_inner(u, v, Q) -> float:
    """<u, v>_Q = N^-1 sum u_i v_i / Q_i."""
    return float(np.mean(np.asarray(u) * np.asarray(v) / np.asarray(Q)))
