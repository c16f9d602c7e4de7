"""Ghost-point diffusion maps for Dirichlet problems on manifolds with boundary.

Pipeline: outward normals at boundary points -> ghost points along each normal
(one interior layer, K exterior layers) -> extrapolation operator G giving
ghost values from values on the augmented cloud X^h -> rectangular estimator
(L1, L2) over X^h rows and X^h + exterior-ghost columns -> L~ = L1 + L2 G.

X^h is the training cloud with one interior ghost per boundary point appended
at the end (``interior="append"``), or the training cloud itself when every
interior ghost is an existing interior sample (``interior="snap"`` picks the
sample nearest the ideal ghost, ``interior="chord"`` the neighbor whose chord to
the boundary point is best aligned with the normal).

The default estimator here is the graph form: ghost rows only need consistency
near the boundary, and the graph form is the one that stays accurate there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericalFailure
from .neighbors import knn
from .operator import (DEFAULT_CONVENTION, SparseOperator, SymmetryTag,
                       assemble_kernel_operator)

NORMAL_METHODS = ("analytic", "kernel", "tangent")
INTERIOR_MODES = ("chord", "snap", "append")
GPDM_FORM = "graph"


@dataclass(frozen=True)
class GhostSet:
    h: np.ndarray  # (N_b,) spacing per boundary point
    K: int
    normals: np.ndarray  # (N_b, n)
    boundary_points: np.ndarray  # (N_b, n)
    interior_ghosts: np.ndarray  # (N_b, n)
    # index into the training cloud of each snapped interior ghost, or None when appended
    snapped_to: np.ndarray | None = None

    @property
    def n_boundary(self) -> int:
        return self.normals.shape[0]

    @property
    def exterior_points(self) -> np.ndarray:
        """(N_b * K, n), ordered b-major: row b*K + (k-1) is ghost (b, k)."""
        k = np.arange(1, self.K + 1)
        steps = (self.h[:, None] * k[None, :])[:, :, None] * self.normals[:, None, :]
        return (self.boundary_points[:, None, :] + steps).reshape(-1, self.normals.shape[1])


@dataclass(frozen=True)
class GpdmOperator:
    L_tilde: SparseOperator  # (N_h, N_h)
    L_interior: SparseOperator  # (N_h - N_b, N_h)
    G: SparseOperator  # (N_b K, N_h)
    L1: SparseOperator
    L2: SparseOperator
    points: np.ndarray  # X^h, (N_h, n)
    boundary_index: np.ndarray  # positions of boundary points in X^h
    interior_index: np.ndarray  # positions of the remaining rows of X^h
    ghosts: GhostSet

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def _tangent_basis(local: np.ndarray, d: int) -> np.ndarray:
    """Top-d principal directions of a centered neighborhood, shape (n, d)."""
    centered = local - local.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return vt[:d].T


def _orient(normals, points, boundary_indices, interior_mask, P):
    """Flip normals that point towards the centroid of nearby interior samples."""
    interior_pts = points[interior_mask]
    nb = knn(interior_pts, min(P, len(interior_pts)), queries=points[boundary_indices])
    centroid = interior_pts[nb.indices].mean(axis=1)
    inward = centroid - points[boundary_indices]
    flip = np.einsum("ij,ij->i", normals, inward) > 0
    normals = normals.copy()
    normals[flip] *= -1.0
    return normals


def estimate_normals(cloud, boundary_indices, epsilon: float, method: str = "kernel", P: int = 10,
                     k: int = 32, manifold=None) -> np.ndarray:
    """Outward unit conormals at the given boundary points.

    ``analytic`` differentiates the known embedding (needs intrinsic
    coordinates and ``manifold``). ``kernel`` takes the direction from the
    kernel-weighted centroid of the ``k`` nearest samples to the boundary
    point, projected on a local PCA tangent plane with the boundary's own
    tangent directions removed. ``tangent`` is the kernel
    direction replaced by the chord to the best-aligned interior neighbor,
    which suits well-ordered data.
    """
    boundary_indices = np.asarray(boundary_indices, dtype=np.int64)
    if boundary_indices.size == 0:
        raise ConfigError("no boundary points given")
    if method not in NORMAL_METHODS:
        raise ConfigError(f"unknown normal method {method!r}")
    points = np.asarray(cloud.points, dtype=float)
    interior_mask = np.ones(len(points), dtype=bool)
    interior_mask[boundary_indices] = False

    if method == "analytic":
        if cloud.intrinsic is None or manifold is None:
            raise ConfigError("analytic normals need intrinsic coordinates and the manifold")
        from .manifolds import embed_jacobian, get_spec

        spec = get_spec(manifold)
        t = cloud.intrinsic[boundary_indices]
        jac = embed_jacobian(spec, t)
        normals = np.zeros((len(t), points.shape[1]))
        for j, per in enumerate(spec.periodic):
            if per:
                continue
            lo, hi = spec.ranges[j]
            sign = np.where(np.isclose(t[:, j], lo), -1.0, np.where(np.isclose(t[:, j], hi), 1.0, 0.0))
            normals += sign[:, None] * jac[..., j]
    else:
        d = cloud.d
        nb = knn(points, min(k, len(points) - 1))
        n_plane = min(2 * d + 4, nb.k)
        along = None
        if d > 1 and len(boundary_indices) > d:
            along = knn(points[boundary_indices], min(2 * d, len(boundary_indices) - 1))
        normals = np.zeros((len(boundary_indices), points.shape[1]))
        for r, b in enumerate(boundary_indices):
            idx = nb.indices[b]
            w = np.exp(-nb.squared_distances[b] / (4.0 * epsilon))
            v = points[b] - (w[:, None] * points[idx]).sum(axis=0) / w.sum()
            basis = _tangent_basis(np.vstack([points[b], points[idx[:n_plane]]]), d)
            v = basis @ (basis.T @ v)
            if along is not None:
                # strip the component along the boundary itself
                edge = points[boundary_indices][np.append(along.indices[r], r)]
                tb = _tangent_basis(edge, d - 1)
                v = v - tb @ (tb.T @ v)
            normals[r] = v
        if method == "tangent":
            normals = _chord_normals(points, boundary_indices, interior_mask, normals, P)[0]

    norms = np.linalg.norm(normals, axis=1)
    bad = np.flatnonzero(~(norms > 0))
    if bad.size:
        raise NumericalFailure(f"zero normal direction at boundary point {boundary_indices[bad[0]]}",
                               index=int(boundary_indices[bad[0]]))
    normals = normals / norms[:, None]
    return _orient(normals, points, boundary_indices, interior_mask, P)


CHORD_CONE_DEG = 30.0


def _chord_normals(points, boundary_indices, interior_mask, approx_normals, P,
                   cone_deg: float = CHORD_CONE_DEG):
    """Chord to the nearest of the P closest interior samples inside a cone around -normal.

    Falls back to the best-aligned candidate when the cone is empty. Returns
    (chords, chosen sample indices).
    """
    interior_idx = np.flatnonzero(interior_mask)
    nb = knn(points[interior_idx], min(P, len(interior_idx)), queries=points[boundary_indices])
    chosen = np.empty(len(boundary_indices), dtype=np.int64)
    out = np.empty_like(approx_normals)
    min_cos = math.cos(math.radians(cone_deg))
    for r, b in enumerate(boundary_indices):
        cand = interior_idx[nb.indices[r]]  # sorted by distance
        chords = points[b] - points[cand]
        lengths = np.linalg.norm(chords, axis=1)
        cosine = chords @ approx_normals[r] / (lengths * np.linalg.norm(approx_normals[r]))
        inside = np.flatnonzero(cosine >= min_cos)
        best = int(inside[0]) if inside.size else int(np.argmax(cosine))
        chosen[r] = cand[best]
        out[r] = chords[best]
    return out, chosen


def default_layers(h, epsilon: float) -> int:
    """Smallest K with K h >= 2 sqrt(eps log(1/eps)) for every boundary spacing."""
    reach = 2.0 * math.sqrt(epsilon * math.log(1.0 / epsilon)) if epsilon < 1 else 2.0 * math.sqrt(epsilon)
    return max(1, int(math.ceil(reach / float(np.min(h)) - 1e-12)))


def place_ghosts(cloud, boundary_indices, normals, K: int | None = None, P: int = 10,
                 epsilon: float | None = None, interior: str = "chord") -> GhostSet:
    """Ghost points x_b + k h_b nu_b (k = 1..K) and interior ghosts x_b - h_b nu_b.

    ``h_b`` is the mean distance from boundary point b to its P nearest samples.
    With ``interior="snap"`` the interior ghost of b becomes the existing
    interior sample closest to x_b - h_b nu_b; normal and spacing are then
    redefined by the chord to that sample so the ghost line stays straight.
    ``interior="chord"`` instead takes, among the P nearest interior samples,
    the one whose chord is best aligned with the normal.
    """
    if P < 1:
        raise ConfigError("P must be at least 1")
    if interior not in INTERIOR_MODES:
        raise ConfigError(f"unknown interior ghost mode {interior!r}")
    boundary_indices = np.asarray(boundary_indices, dtype=np.int64)
    points = np.asarray(cloud.points, dtype=float)
    xb = points[boundary_indices]
    nb = knn(points, min(P, len(points) - 1))
    h = np.sqrt(nb.squared_distances[boundary_indices]).mean(axis=1)
    if np.any(~(h > 0)):
        raise NumericalFailure("zero ghost spacing (duplicate points?)")
    normals = np.asarray(normals, dtype=float)
    snapped = None
    interior_mask = np.ones(len(points), dtype=bool)
    interior_mask[boundary_indices] = False
    if interior == "chord":
        chord, snapped = _chord_normals(points, boundary_indices, interior_mask, normals, P)
        h = np.linalg.norm(chord, axis=1)
        normals = chord / h[:, None]
    elif interior == "snap":
        interior_idx = np.flatnonzero(interior_mask)
        target = xb - h[:, None] * normals
        hit = knn(points[interior_idx], 1, queries=target)
        snapped = interior_idx[hit.indices[:, 0]]
        chord = xb - points[snapped]
        h = np.linalg.norm(chord, axis=1)
        normals = chord / h[:, None]
    if K is None:
        if epsilon is None:
            raise ConfigError("pass K or epsilon")
        K = default_layers(h, epsilon)
    if K < 1:
        raise ConfigError("K must be at least 1")
    inner = points[snapped] if snapped is not None else xb - h[:, None] * normals
    return GhostSet(h, int(K), normals, xb.copy(), inner, snapped)


def build_extrapolation(ghosts: GhostSet, boundary_positions, interior_ghost_positions,
                        n_columns: int) -> SparseOperator:
    """G with U_{b,k} = (k+1) u(x_b) - k u(x~_{b,0}), the unrolled second-difference recursion."""
    boundary_positions = np.asarray(boundary_positions, dtype=np.int64)
    interior_ghost_positions = np.asarray(interior_ghost_positions, dtype=np.int64)
    nb, K = ghosts.n_boundary, ghosts.K
    if boundary_positions.shape != (nb,) or interior_ghost_positions.shape != (nb,):
        raise ConfigError("need one boundary and one interior-ghost position per boundary point")
    if np.any(interior_ghost_positions < 0) or np.any(interior_ghost_positions >= n_columns):
        raise ConfigError("interior ghost position missing from the augmented cloud")
    k = np.tile(np.arange(1, K + 1), nb)
    row = np.arange(nb * K)
    b = np.repeat(np.arange(nb), K)
    rows = np.concatenate([row, row])
    cols = np.concatenate([boundary_positions[b], interior_ghost_positions[b]])
    vals = np.concatenate([k + 1.0, -k.astype(float)])
    return SparseOperator.from_triplets(nb * K, n_columns, rows, cols, vals)


def extrapolate_recursive(u_boundary, u_interior_ghost, K: int) -> np.ndarray:
    """Ghost values by running the recursion directly, shape (N_b, K)."""
    ub = np.asarray(u_boundary, float)
    u0 = np.asarray(u_interior_ghost, float)
    out = np.empty(ub.shape + (K,))
    prev2, prev1 = u0, ub
    for j in range(K):
        cur = 2.0 * prev1 - prev2
        out[..., j] = cur
        prev2, prev1 = prev1, cur
    return out


def assemble_gpdm(cloud, kappa_fn, epsilon: float, k: int, K: int | None = None, P: int = 10,
                  normal_method: str = "kernel", interior: str = "chord", manifold=None,
                  convention: str = DEFAULT_CONVENTION, form: str = GPDM_FORM,
                  normals=None) -> GpdmOperator:
    """Build X^h, ghosts, G and the composite estimator L~ for a cloud with boundary.

    ``kappa_fn`` maps ambient points (M, n) to diffusion coefficients (M,);
    it is evaluated on X^h and on the exterior ghosts.
    """
    points = np.asarray(cloud.points, dtype=float)
    boundary = cloud.boundary_indices
    n = len(points)
    if boundary.size == 0:
        kap = np.asarray(kappa_fn(points), float)
        asm = assemble_kernel_operator(points, n, kap, epsilon, cloud.d, k, convention, form)
        empty = SparseOperator(sp.csr_matrix((0, n)))
        dim = points.shape[1]
        gs = GhostSet(np.zeros(0), 1, np.zeros((0, dim)), np.zeros((0, dim)), np.zeros((0, dim)))
        return GpdmOperator(asm.operator, asm.operator, empty, asm.operator,
                            SparseOperator(sp.csr_matrix((n, 0))), points, boundary,
                            np.arange(n), gs)

    if normals is None:
        normals = estimate_normals(cloud, boundary, epsilon, normal_method, P=P, manifold=manifold)
    ghosts = place_ghosts(cloud, boundary, normals, K, P, epsilon, interior)

    if interior == "append":
        xh = np.vstack([points, ghosts.interior_ghosts])
        ig_pos = n + np.arange(ghosts.n_boundary)
    else:
        xh = points
        ig_pos = ghosts.snapped_to
    nh = len(xh)
    all_pts = np.vstack([xh, ghosts.exterior_points])
    kap = np.asarray(kappa_fn(all_pts), float)
    asm = assemble_kernel_operator(all_pts, nh, kap, epsilon, cloud.d, k, convention, form)
    Lh = asm.operator.matrix
    L1 = SparseOperator(Lh[:, :nh])
    L2 = SparseOperator(Lh[:, nh:])
    G = build_extrapolation(ghosts, boundary, ig_pos, nh)
    L_tilde = SparseOperator(L1.matrix + L2.matrix @ G.matrix, SymmetryTag.GENERAL)
    rest = np.setdiff1d(np.arange(nh), boundary)
    return GpdmOperator(L_tilde, L_tilde.rows(rest), G, L1, L2, xh, boundary, rest, ghosts)


def write_ghosts_csv(ghosts: GhostSet, path) -> None:
    """Rows ``b,k,x1..xn``; k = 0 is the interior ghost."""
    n = ghosts.normals.shape[1]
    ext = ghosts.exterior_points.reshape(ghosts.n_boundary, ghosts.K, n)
    with open(path, "w") as fh:
        fh.write(",".join(["b", "k"] + [f"x{i + 1}" for i in range(n)]) + "\n")
        for b in range(ghosts.n_boundary):
            layers = [ghosts.interior_ghosts[b]] + list(ext[b])
            for kk, x in enumerate(layers):
                fh.write(",".join([str(b), str(kk)] + [f"{v:.17g}" for v in x]) + "\n")
