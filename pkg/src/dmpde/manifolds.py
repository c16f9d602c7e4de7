"""Benchmark manifolds: embeddings, coefficients, manufactured solutions, samplers.

Three manifolds are provided:

* ``Torus2D``: the standard torus in R^3, closed.
* ``Flat3DinR12``: a flat 3-torus embedded in R^12 by first and second harmonics.
* ``SemiTorus2D``: half of ``Torus2D`` (theta_2 in [0, pi]) with two boundary circles.

Intrinsic coordinates are only used to generate data and evaluate errors; the
solvers see ambient coordinates exclusively.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError

TWO_PI = 2.0 * np.pi


class ManifoldId(str, Enum):
    TORUS2D = "Torus2D"
    FLAT3D_R12 = "Flat3DinR12"
    SEMITORUS2D = "SemiTorus2D"


@dataclass(frozen=True)
class ManifoldSpec:
    id: ManifoldId
    d: int
    n: int
    ranges: tuple[tuple[float, float], ...]
    # per-coordinate: True when the interval is periodic (half-open)
    periodic: tuple[bool, ...]

    @property
    def closed(self) -> bool:
        return all(self.periodic)


_SPECS = {
    ManifoldId.TORUS2D: ManifoldSpec(
        ManifoldId.TORUS2D, 2, 3, ((0.0, TWO_PI), (0.0, TWO_PI)), (True, True)
    ),
    ManifoldId.FLAT3D_R12: ManifoldSpec(
        ManifoldId.FLAT3D_R12,
        3,
        12,
        ((0.0, TWO_PI), (0.0, TWO_PI), (0.0, TWO_PI)),
        (True, True, True),
    ),
    ManifoldId.SEMITORUS2D: ManifoldSpec(
        ManifoldId.SEMITORUS2D, 2, 3, ((0.0, TWO_PI), (0.0, np.pi)), (True, False)
    ),
}


def get_spec(manifold) -> ManifoldSpec:
    if isinstance(manifold, ManifoldSpec):
        return manifold
    try:
        return _SPECS[ManifoldId(manifold)]
    except ValueError:
        raise ConfigError(f"unknown manifold id {manifold!r}") from None


def _intrinsic(spec: ManifoldSpec, intrinsic) -> np.ndarray:
    t = np.asarray(intrinsic, dtype=float)
    if t.shape[-1] != spec.d:
        raise ConfigError(f"{spec.id.value} expects {spec.d} intrinsic coordinates, got {t.shape[-1]}")
    return t


# --------------------------------------------------------------------------
# Embeddings
# --------------------------------------------------------------------------


def embed(spec, intrinsic) -> np.ndarray:
    """Map intrinsic coordinates of shape (..., d) to ambient (..., n)."""
    spec = get_spec(spec)
    t = _intrinsic(spec, intrinsic)
    if spec.id in (ManifoldId.TORUS2D, ManifoldId.SEMITORUS2D):
        t1, t2 = t[..., 0], t[..., 1]
        r = 2.0 + np.cos(t1)
        return np.stack([r * np.cos(t2), r * np.sin(t2), np.sin(t1)], axis=-1)
    cols = []
    for j in range(3):
        tj = t[..., j]
        cols += [np.sin(tj), np.cos(tj), np.sin(2 * tj), np.cos(2 * tj)]
    return np.stack(cols, axis=-1)


def embed_jacobian(spec, intrinsic) -> np.ndarray:
    """Derivative of the embedding, shape (..., n, d)."""
    spec = get_spec(spec)
    t = _intrinsic(spec, intrinsic)
    if spec.id in (ManifoldId.TORUS2D, ManifoldId.SEMITORUS2D):
        t1, t2 = t[..., 0], t[..., 1]
        r = 2.0 + np.cos(t1)
        zero = np.zeros_like(t1)
        d1 = np.stack([-np.sin(t1) * np.cos(t2), -np.sin(t1) * np.sin(t2), np.cos(t1)], axis=-1)
        d2 = np.stack([-r * np.sin(t2), r * np.cos(t2), zero], axis=-1)
        return np.stack([d1, d2], axis=-1)
    jac = np.zeros(t.shape[:-1] + (12, 3))
    for j in range(3):
        tj = t[..., j]
        jac[..., 4 * j + 0, j] = np.cos(tj)
        jac[..., 4 * j + 1, j] = -np.sin(tj)
        jac[..., 4 * j + 2, j] = 2 * np.cos(2 * tj)
        jac[..., 4 * j + 3, j] = -2 * np.sin(2 * tj)
    return jac


# --------------------------------------------------------------------------
# Coefficients and manufactured solutions
# --------------------------------------------------------------------------


def diffusion_kappa(spec, intrinsic) -> np.ndarray:
    spec = get_spec(spec)
    t = _intrinsic(spec, intrinsic)
    if spec.id == ManifoldId.FLAT3D_R12:
        return np.ones(t.shape[:-1])
    t1, t2 = t[..., 0], t[..., 1]
    return 1.1 + np.sin(t1) ** 2 * np.cos(t2) ** 2


def exact_solution(spec, intrinsic) -> np.ndarray:
    spec = get_spec(spec)
    t = _intrinsic(spec, intrinsic)
    if spec.id == ManifoldId.FLAT3D_R12:
        return np.sin(t[..., 0]) * np.cos(t[..., 1]) * np.sin(2 * t[..., 2])
    t1, t2 = t[..., 0], t[..., 1]
    return (np.sin(2 * t2) - 2 * np.cos(2 * t2) / (2 + np.cos(t1))) * np.cos(t1)


def rhs_f(spec, intrinsic) -> np.ndarray:
    """div_g(kappa grad_g u) for the manufactured solution, in closed form.

    For the torus family the metric is diag(1, P^2) with P = 2 + cos(theta_1),
    so the operator expands to

        kappa * (u_11 - sin(t1)/P * u_1 + u_22 / P^2) + kappa_1 u_1 + kappa_2 u_2 / P^2.

    The 12-dimensional embedding has metric 5 I, giving f = -(6/5) u.
    """
    spec = get_spec(spec)
    t = _intrinsic(spec, intrinsic)
    if spec.id == ManifoldId.FLAT3D_R12:
        return -1.2 * exact_solution(spec, t)
    t1, t2 = t[..., 0], t[..., 1]
    s1, c1 = np.sin(t1), np.cos(t1)
    s2t, c2t = np.sin(2 * t2), np.cos(2 * t2)
    p = 2.0 + c1
    u_1 = -s2t * s1 + 4.0 * c2t * s1 / p**2
    u_11 = -s2t * c1 + 4.0 * c2t * (c1 * p + 2.0 * s1**2) / p**3
    u_2 = (2.0 * c2t + 4.0 * s2t / p) * c1
    u_22 = (-4.0 * s2t + 8.0 * c2t / p) * c1
    kappa = 1.1 + s1**2 * np.cos(t2) ** 2
    kappa_1 = np.sin(2 * t1) * np.cos(t2) ** 2
    kappa_2 = -(s1**2) * s2t
    return kappa * (u_11 - s1 / p * u_1 + u_22 / p**2) + kappa_1 * u_1 + kappa_2 * u_2 / p**2


# --------------------------------------------------------------------------
# Point clouds
# --------------------------------------------------------------------------


@dataclass
class PointCloud:
    points: np.ndarray
    intrinsic: np.ndarray | None
    boundary_mask: np.ndarray
    d: int
    seed: int | None = None

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n_boundary(self) -> int:
        return int(self.boundary_mask.sum())

    @property
    def boundary_indices(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @property
    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)


def rng_stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for (seed, purpose); stable across platforms."""
    return np.random.default_rng([int(seed), zlib.crc32(purpose.encode())])


def default_n_boundary(spec, n_points: int) -> int:
    spec = get_spec(spec)
    if spec.closed:
        return 0
    nb = int(round(2 * np.sqrt(n_points)))
    return nb + (nb % 2)


def _wrap(spec: ManifoldSpec, t: np.ndarray) -> np.ndarray:
    t = t.copy()
    for j, per in enumerate(spec.periodic):
        if per:
            lo, hi = spec.ranges[j]
            t[:, j] = lo + np.mod(t[:, j] - lo, hi - lo)
    return t


def _grid_axes(spec: ManifoldSpec, side: int):
    axes = []
    for (lo, hi), per in zip(spec.ranges, spec.periodic):
        if per:
            axes.append(lo + (hi - lo) * np.arange(side) / side)
        else:
            axes.append(np.linspace(lo, hi, side))
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, spec.d)


def _on_boundary(spec: ManifoldSpec, t: np.ndarray) -> np.ndarray:
    mask = np.zeros(len(t), dtype=bool)
    for j, per in enumerate(spec.periodic):
        if not per:
            lo, hi = spec.ranges[j]
            mask |= (t[:, j] == lo) | (t[:, j] == hi)
    return mask


def sample_cloud(spec, n_points: int, n_boundary: int | None = None, seed: int = 0,
                 layout: str = "random") -> PointCloud:
    """Sample ``n_points`` points, the last ``n_boundary`` of them on the boundary.

    ``layout="random"`` draws interior points i.i.d. uniform in the intrinsic
    box and boundary points uniform in theta_1, split evenly between
    theta_2 = 0 and theta_2 = pi. ``layout="grid"`` is a tensor grid with
    ``n_points`` a perfect d-th power; periodic axes are sampled at ``i/side``
    of their period, the bounded axis includes both end points, which then
    form the boundary (so ``n_boundary`` is fixed by the grid).
    """
    spec = get_spec(spec)
    if n_points <= 0:
        raise ConfigError("n_points must be positive")
    if layout == "grid":
        side = round(n_points ** (1.0 / spec.d))
        if side**spec.d != n_points:
            raise ConfigError(f"grid layout needs a perfect power, got {n_points} points")
        t = _grid_axes(spec, side)
        mask = _on_boundary(spec, t)
        if n_boundary is not None and n_boundary != mask.sum():
            raise ConfigError(f"grid of {n_points} points has {mask.sum()} boundary points, not {n_boundary}")
        t = np.concatenate([t[~mask], t[mask]])
        return PointCloud(embed(spec, t), t, np.sort(mask), spec.d, seed)
    if layout != "random":
        raise ConfigError(f"unknown layout {layout!r}")

    if n_boundary is None:
        n_boundary = default_n_boundary(spec, n_points)
    if spec.closed and n_boundary:
        raise ConfigError(f"{spec.id.value} is closed; n_boundary must be 0")
    if not spec.closed and n_boundary <= 0:
        raise ConfigError(f"{spec.id.value} has a boundary; n_boundary must be positive")
    if n_boundary >= n_points:
        raise ConfigError("n_boundary must be smaller than n_points")
    n_int = n_points - n_boundary
    lo = np.array([r[0] for r in spec.ranges])
    hi = np.array([r[1] for r in spec.ranges])
    u01 = rng_stream(seed, "interior").random((n_int, spec.d))
    parts = [lo + (hi - lo) * u01]
    if n_boundary:
        half = n_boundary // 2
        rng = rng_stream(seed, "boundary")
        for level, count in zip(spec.ranges[1], (half, n_boundary - half)):
            parts.append(np.column_stack([TWO_PI * rng.random(count), np.full(count, level)]))
    t = _wrap(spec, np.concatenate(parts))
    mask = np.zeros(n_points, dtype=bool)
    mask[n_int:] = True
    return PointCloud(embed(spec, t), t, mask, spec.d, seed)


def project_to_intrinsic(spec, points) -> np.ndarray:
    """Intrinsic coordinates of the closest manifold point (torus family only).

    Used to evaluate manufactured data at ghost points lying slightly off the manifold.
    """
    spec = get_spec(spec)
    if spec.id == ManifoldId.FLAT3D_R12:
        x = np.asarray(points, float)
        return np.mod(np.stack([np.arctan2(x[..., 4 * j], x[..., 4 * j + 1]) for j in range(3)], -1), TWO_PI)
    x = np.asarray(points, float)
    rho = np.hypot(x[..., 0], x[..., 1])
    t2 = np.mod(np.arctan2(x[..., 1], x[..., 0]), TWO_PI)
    t1 = np.mod(np.arctan2(x[..., 2], rho - 2.0), TWO_PI)
    return np.stack([t1, t2], axis=-1)


def test_grid(spec, resolution: int) -> PointCloud:
    """Tensor Gauss-Legendre grid mapped to the intrinsic ranges (testing only)."""
    spec = get_spec(spec)
    if resolution < 2:
        raise ConfigError("resolution must be at least 2")
    nodes, _ = np.polynomial.legendre.leggauss(resolution)
    axes = [lo + (hi - lo) * (nodes + 1.0) / 2.0 for lo, hi in spec.ranges]
    t = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, spec.d)
    return PointCloud(embed(spec, t), t, np.zeros(len(t), dtype=bool), spec.d, None)


test_grid.__test__ = False  # not a pytest test despite the name


def write_cloud_csv(cloud: PointCloud, path) -> None:
    n = cloud.points.shape[1]
    header = [f"x{i + 1}" for i in range(n)]
    if cloud.intrinsic is not None:
        header += [f"t{i + 1}" for i in range(cloud.d)]
    header.append("boundary")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(cloud)):
            row = [f"{v:.17g}" for v in cloud.points[i]]
            if cloud.intrinsic is not None:
                row += [f"{v:.17g}" for v in cloud.intrinsic[i]]
            row.append(int(cloud.boundary_mask[i]))
            w.writerow(row)


def read_cloud_csv(path, d: int | None = None) -> PointCloud:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    tcols = [i for i, h in enumerate(header) if h.startswith("t")]
    data = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
    intrinsic = data[:, tcols] if tcols else None
    if d is None:
        if not tcols:
            raise ConfigError("intrinsic dimension unknown; pass d")
        d = len(tcols)
    mask = data[:, header.index("boundary")].astype(bool)
    return PointCloud(data[:, xcols], intrinsic, mask, d, None)
