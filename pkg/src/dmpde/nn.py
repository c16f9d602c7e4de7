"""Fully connected networks trained on diffusion-maps residual losses.

Plain numpy, float64. A network is

    phi(x) = a . h_L(...h_1(x)),   h_l(z) = sigma_l(W_l z + b_l)

with ReLU, ReLU^r or the trainable Polynomial-Sine activation
sigma(z) = alpha1 sin(beta1 z) + alpha2 z + alpha3 z^2 (one coefficient set per
layer). Gradients are computed by hand-written reverse mode.

Losses (mean-of-squares norms over the sample points):

    closed:     1/2 mean_i r_i^2 + gamma/2 mean_j phi_j^2
    Dirichlet:  1/2 mean_i r_i^2 + lambda/2 mean_b (phi_b - g_b)^2

with r = (-a + L) phi - f over the operator rows in use.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericalFailure
from .manifolds import rng_stream
from .operator import SparseOperator

PARAMS_FORMAT_VERSION = 1
DIVERGENCE_LIMIT = 1e12
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
# Polynomial-Sine coefficient init: (mean, std) for beta1, alpha1, alpha2, alpha3.
# N(mu, 0.01) is read as variance 0.01.
POLYSINE_INIT = ((1.0, 0.1), (1.0, 0.1), (0.0, 0.1), (0.0, 0.1))
EVAL_CHUNK = 65536


class Activation(str, Enum):
    RELU = "relu"
    RELU_POW = "relupow"
    POLY_SINE = "polysine"


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    width: int
    depth: int = 3
    activation: Activation = Activation.POLY_SINE
    power: int = 1  # r for ReLU^r
    bias: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, "activation", Activation(self.activation))
        except ValueError:
            raise ConfigError(f"unknown activation {self.activation!r}") from None
        if self.input_dim < 1 or self.width < 1 or self.depth < 1:
            raise ConfigError("input_dim, width and depth must be positive")
        if self.activation is Activation.RELU_POW and (int(self.power) != self.power or self.power < 1):
            raise ConfigError("ReLU power must be an integer >= 1")

    @property
    def n_coefs(self) -> int:
        return 4 if self.activation is Activation.POLY_SINE else 0


@dataclass
class NetworkParams:
    arch: Architecture
    weights: list  # W_l, shape (width, fan_in)
    biases: list  # b_l, shape (width,); empty list without biases
    a: np.ndarray  # (width,)
    coefs: np.ndarray  # (depth, 4) as beta1, alpha1, alpha2, alpha3; (depth, 0) otherwise
    init_seed: int | None = None
    init_gamma: float | None = None

    def names(self) -> list:
        L = self.arch.depth
        out = [f"W{l + 1}" for l in range(L)]
        out += [f"b{l + 1}" for l in range(len(self.biases))]
        out.append("a")
        if self.coefs.size:
            out.append("coefs")
        return out

    def arrays(self) -> list:
        out = list(self.weights) + list(self.biases) + [self.a]
        if self.coefs.size:
            out.append(self.coefs)
        return out

    def with_arrays(self, arrays) -> "NetworkParams":
        arrays = list(arrays)
        L = self.arch.depth
        nb = len(self.biases)
        w, b = arrays[:L], arrays[L:L + nb]
        a = arrays[L + nb]
        coefs = arrays[L + nb + 1] if self.coefs.size else self.coefs
        return replace(self, weights=list(w), biases=list(b), a=a, coefs=coefs)

    def copy(self) -> "NetworkParams":
        return self.with_arrays([x.copy() for x in self.arrays()])

    def zeros_like(self) -> "NetworkParams":
        return self.with_arrays([np.zeros_like(x) for x in self.arrays()])

    def n_parameters(self) -> int:
        return int(sum(x.size for x in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([x.ravel() for x in self.arrays()])

    def from_flat(self, vec) -> "NetworkParams":
        out, pos = [], 0
        for x in self.arrays():
            out.append(np.asarray(vec[pos:pos + x.size], float).reshape(x.shape).copy())
            pos += x.size
        return self.with_arrays(out)

    # serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        arch = asdict(self.arch)
        arch["activation"] = self.arch.activation.value
        return {
            "version": PARAMS_FORMAT_VERSION,
            "arch": arch,
            "init_seed": self.init_seed,
            "init_gamma": self.init_gamma,
            "arrays": {n: {"shape": list(x.shape), "data": x.ravel().tolist()}
                       for n, x in zip(self.names(), self.arrays())},
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "NetworkParams":
        if blob.get("version") != PARAMS_FORMAT_VERSION:
            raise ConfigError(f"unsupported params version {blob.get('version')!r}")
        arch = Architecture(**blob["arch"])
        arrs = {n: np.asarray(v["data"], float).reshape(v["shape"]) for n, v in blob["arrays"].items()}
        L = arch.depth
        weights = [arrs[f"W{l + 1}"] for l in range(L)]
        biases = [arrs[f"b{l + 1}"] for l in range(L)] if arch.bias else []
        coefs = arrs.get("coefs", np.zeros((L, 0)))
        return cls(arch, weights, biases, arrs["a"], coefs, blob.get("init_seed"), blob.get("init_gamma"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "NetworkParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# initialisation

INIT_SCHEMES = ("auto", "he", "shifted")
SHIFTED_SPREAD = 0.3
SHIFTED_CENTRE = 1.0


def _resolve_init(arch: Architecture, scheme: str, has_data: bool) -> str:
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    if scheme == "auto":
        powered = arch.activation is Activation.RELU_POW and arch.power > 1
        return "shifted" if powered and has_data else "he"
    return scheme


def init_params(arch: Architecture, seed: int = 0, X=None, scheme: str = "auto") -> NetworkParams:
    """He-scaled Gaussian weights, zero biases, Polynomial-Sine coefficients near sin.

    ``scheme="shifted"`` (needs ``X``) then rescales layer by layer so that the
    pre-activations over ``X`` have standard deviation ``SHIFTED_SPREAD`` around
    a bias of ``SHIFTED_CENTRE``. ReLU^r with r > 1 is homogeneous of degree
    r^depth, so He scaling gives heavy-tailed features and a loss Hessian too
    stiff for plain gradient descent; ``"auto"`` uses the shifted variant there
    whenever ``X`` is supplied.
    """
    scheme = _resolve_init(arch, scheme, X is not None)
    params = _init_he(arch, seed)
    if scheme == "shifted":
        if X is None:
            raise ConfigError("the shifted init needs the training inputs X")
        params = _shifted(params, np.asarray(getattr(X, "points", X), float))
    return params


def _shifted(params: NetworkParams, X: np.ndarray) -> NetworkParams:
    if not params.arch.bias:
        raise ConfigError("the shifted init needs bias terms")
    weights = [w.copy() for w in params.weights]
    biases = [np.full(params.arch.width, SHIFTED_CENTRE) for _ in weights]
    h = X
    for l, w in enumerate(weights):
        z = h @ w.T
        sd = float(np.std(z))
        if not sd > 0 or not math.isfinite(sd):
            raise NumericalFailure(f"degenerate pre-activations in layer {l + 1}")
        w *= SHIFTED_SPREAD / sd
        h, _ = _activate(params.arch, z * (SHIFTED_SPREAD / sd) + biases[l], params.coefs[l])
    return replace(params, weights=weights, biases=biases)


def _init_he(arch: Architecture, seed: int) -> NetworkParams:
    rng = rng_stream(seed, "nn-init")
    weights, biases = [], []
    fan_in = arch.input_dim
    for _ in range(arch.depth):
        weights.append(rng.standard_normal((arch.width, fan_in)) * math.sqrt(2.0 / fan_in))
        if arch.bias:
            biases.append(np.zeros(arch.width))
        fan_in = arch.width
    a = rng.standard_normal(arch.width) * math.sqrt(1.0 / arch.width)
    if arch.activation is Activation.POLY_SINE:
        coefs = np.column_stack([mu + sd * rng.standard_normal(arch.depth) for mu, sd in POLYSINE_INIT])
    else:
        coefs = np.zeros((arch.depth, 0))
    return NetworkParams(arch, weights, biases, a, coefs, seed, None)


def init_two_layer_ntk(n: int, m: int, gamma: float, seed: int = 0, power: int = 1) -> NetworkParams:
    """phi(x) = sum_k a_k relu(w_k . x)^r with a_k ~ N(0, gamma^2), w_k ~ N(0, I_n), no biases."""
    if m < 1:
        raise ConfigError("m must be >= 1")
    if not 0 <= gamma < 1:
        raise ConfigError("gamma must lie in [0, 1)")
    act = Activation.RELU if power == 1 else Activation.RELU_POW
    arch = Architecture(n, m, depth=1, activation=act, power=power, bias=False)
    rng = rng_stream(seed, "ntk-init")
    w = rng.standard_normal((m, n))
    a = gamma * rng.standard_normal(m)
    return NetworkParams(arch, [w], [], a, np.zeros((1, 0)), seed, float(gamma))


# ---------------------------------------------------------------------------
# activations

def _activate(arch: Architecture, z: np.ndarray, c: np.ndarray, keep: bool = False):
    """(sigma(z), aux) where aux caches what the backward pass needs."""
    act = arch.activation
    if act is Activation.POLY_SINE:
        beta, a1, a2, a3 = c
        bz = beta * z
        sn = np.sin(bz)
        poly = a3 * z
        poly += a2
        poly *= z
        out = a1 * sn
        out += poly
        return out, ((sn, np.cos(bz)) if keep else None)
    pos = np.maximum(z, 0.0)
    if act is Activation.RELU or arch.power == 1:
        return pos, None
    return pos ** arch.power, None


def _activation_backward(arch: Architecture, z, c, upstream, aux=None):
    """(dJ/dz, dJ/dcoefs) given dJ/dsigma."""
    act = arch.activation
    if act is Activation.POLY_SINE:
        beta, a1, a2, a3 = c
        sn, cs = aux if aux is not None else (np.sin(beta * z), np.cos(beta * z))
        deriv = (a1 * beta) * cs
        deriv += a2
        deriv += (2.0 * a3) * z
        dz = upstream * deriv
        uz = (upstream * z).ravel()
        dc = np.array([
            a1 * float(np.dot(uz, cs.ravel())),
            float(np.dot(upstream.ravel(), sn.ravel())),
            float(uz.sum()),
            float(np.dot(uz, z.ravel())),
        ])
        return dz, dc
    r = 1 if act is Activation.RELU else arch.power
    if r == 1:
        return upstream * (z > 0.0), None
    return upstream * (r * np.maximum(z, 0.0) ** (r - 1)), None


def activation_derivative(arch: Architecture, z, c=None) -> np.ndarray:
    """sigma'(z) for the layer coefficients ``c``."""
    if c is None:
        c = np.zeros(arch.n_coefs)
    return _activation_backward(arch, np.asarray(z, float), c, np.ones_like(z, dtype=float))[0]


# ---------------------------------------------------------------------------
# evaluation

def _forward_cache(params: NetworkParams, X: np.ndarray, keep: bool = False):
    """Output plus per-layer (input, pre-activation, aux) and the last hidden layer."""
    h = X
    cache = []
    for l in range(params.arch.depth):
        z = h @ params.weights[l].T
        if params.biases:
            z += params.biases[l]
        h_next, aux = _activate(params.arch, z, params.coefs[l], keep)
        cache.append((h, z, aux))
        h = h_next
    out = h @ params.a
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("non-finite network output")
    return out, cache, h


def batch_forward(params: NetworkParams, points) -> np.ndarray:
    """phi at every row of ``points`` (an (B, n) array or a PointCloud)."""
    X = np.asarray(getattr(points, "points", points), dtype=float)
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim:
        raise ConfigError(f"input of shape {X.shape} for a network on R^{params.arch.input_dim}")
    if len(X) <= EVAL_CHUNK:
        return _forward_cache(params, X)[0]
    return np.concatenate([_forward_cache(params, X[s:s + EVAL_CHUNK])[0]
                           for s in range(0, len(X), EVAL_CHUNK)])


def forward(params: NetworkParams, x) -> float:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("non-finite input")
    return float(batch_forward(params, x.reshape(1, -1))[0])


def backward(params: NetworkParams, X: np.ndarray, g_out: np.ndarray) -> NetworkParams:
    """Gradient of sum_i g_out[i] * phi(X_i) with respect to every parameter."""
    _, cache, h_last = _forward_cache(params, np.asarray(X, float), keep=True)
    return _backward_from_cache(params, cache, h_last, np.asarray(g_out, float))


def _backward_from_cache(params, cache, h_last, g_out) -> NetworkParams:
    arch = params.arch
    L = arch.depth
    grad_a = h_last.T @ g_out
    delta = np.outer(g_out, params.a)
    gw, gb = [None] * L, [None] * L
    gc = np.zeros_like(params.coefs)
    for l in range(L - 1, -1, -1):
        h_in, z, aux = cache[l]
        dz, dc = _activation_backward(arch, z, params.coefs[l], delta, aux)
        if dc is not None:
            gc[l] = dc
        gw[l] = dz.T @ h_in
        if params.biases:
            gb[l] = dz.sum(axis=0)
        if l:
            delta = dz @ params.weights[l]
    return params.with_arrays(gw + (gb if params.biases else []) + [grad_a]
                              + ([gc] if params.coefs.size else []))


# ---------------------------------------------------------------------------
# losses

class LossKind(str, Enum):
    CLOSED = "closed"
    DIRICHLET = "dirichlet"


@dataclass
class LossContext:
    """Everything the loss needs besides the network.

    ``operator`` has one row per equation and one column per point. Row i is
    the equation at point ``row_points[i]``, which is where -a_i is added.
    """

    operator: object  # SparseOperator or scipy sparse, (R, N)
    points: np.ndarray  # (N, n)
    f: np.ndarray  # (R,)
    a: object = 0.0  # scalar or (R,)
    row_points: np.ndarray | None = None  # (R,), defaults to arange(R)
    gamma: float = 0.0
    lam: float = 0.0
    boundary_index: np.ndarray | None = None
    g: np.ndarray | None = None
    A: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        op = self.operator.matrix if isinstance(self.operator, SparseOperator) else sp.csr_matrix(self.operator)
        R, N = op.shape
        self.points = np.asarray(self.points, float)
        if self.points.shape[0] != N:
            raise ConfigError(f"operator has {N} columns but {self.points.shape[0]} points were given")
        self.f = np.asarray(self.f, float)
        if self.f.shape != (R,):
            raise ConfigError(f"f has shape {self.f.shape}, expected ({R},)")
        if self.row_points is None:
            if R != N:
                raise ConfigError("row_points is required for a rectangular operator")
            self.row_points = np.arange(R)
        self.row_points = np.asarray(self.row_points, dtype=np.int64)
        if self.row_points.shape != (R,):
            raise ConfigError("row_points must have one entry per operator row")
        if self.gamma < 0 or self.lam < 0:
            raise ConfigError("gamma and lambda must be non-negative")
        a = np.broadcast_to(np.asarray(self.a, float), (R,))
        shift = sp.csr_matrix((a, (np.arange(R), self.row_points)), shape=(R, N))
        self.A = (op - shift).tocsr()
        self.A.sort_indices()
        if self.boundary_index is not None:
            self.boundary_index = np.asarray(self.boundary_index, dtype=np.int64)
            self.g = np.asarray(self.g, float)
            if self.g.shape != self.boundary_index.shape:
                raise ConfigError("g must have one value per boundary point")
        elif self.lam:
            raise ConfigError("lambda > 0 needs boundary points and values")

    @property
    def kind(self) -> LossKind:
        return LossKind.DIRICHLET if self.boundary_index is not None else LossKind.CLOSED

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @classmethod
    def closed(cls, L, points, f, gamma: float, a=0.0) -> "LossContext":
        return cls(L, points, f, a=a, gamma=gamma)

    @classmethod
    def dirichlet(cls, gp, f_interior, g_boundary, lam: float, a=0.0) -> "LossContext":
        """From a GpdmOperator: interior rows of L~ plus the boundary penalty."""
        return cls(gp.L_interior, gp.points, f_interior, a=a, row_points=gp.interior_index,
                   lam=lam, boundary_index=gp.boundary_index, g=g_boundary)


def _plan(ctx: LossContext, rows):
    """Columns the loss touches and the restricted operator for a row subset."""
    if rows is None:
        reg = np.arange(len(ctx.points))
        return None, ctx.A, ctx.f, reg, ctx.boundary_index
    rows = np.asarray(rows, dtype=np.int64)
    A_s = ctx.A[rows]
    parts = [A_s.indices]
    reg = ctx.row_points[rows] if ctx.gamma else np.zeros(0, np.int64)
    parts.append(reg)
    if ctx.boundary_index is not None:
        parts.append(ctx.boundary_index)
    cols = np.unique(np.concatenate(parts))
    remap = np.full(len(ctx.points), -1, dtype=np.int64)
    remap[cols] = np.arange(len(cols))
    A_c = sp.csr_matrix((A_s.data, remap[A_s.indices], A_s.indptr), shape=(len(rows), len(cols)))
    bidx = remap[ctx.boundary_index] if ctx.boundary_index is not None else None
    return cols, A_c, ctx.f[rows], remap[reg], bidx


def _terms_and_grad_phi(ctx, phi, A, f, reg, bidx, want_grad):
    r = A @ phi - f
    terms = {"residual": 0.5 * float(np.mean(r * r)), "regularizer": 0.0, "boundary": 0.0}
    gphi = (A.T @ r) / len(r) if want_grad else None
    if ctx.gamma:
        pr = phi[reg]
        terms["regularizer"] = 0.5 * float(np.mean(pr * pr))
        if want_grad:
            np.add.at(gphi, reg, ctx.gamma * pr / len(reg))
    if bidx is not None:
        e = phi[bidx] - ctx.g
        terms["boundary"] = 0.5 * float(np.mean(e * e))
        if want_grad and ctx.lam:
            np.add.at(gphi, bidx, ctx.lam * e / len(e))
    return terms, gphi


def _combine(ctx, terms) -> float:
    return terms["residual"] + ctx.gamma * terms["regularizer"] + ctx.lam * terms["boundary"]


def loss_terms(params: NetworkParams, ctx: LossContext, row_subset=None) -> dict:
    """Unweighted pieces: residual, regularizer and boundary, each 1/2 mean of squares."""
    cols, A, f, reg, bidx = _plan(ctx, row_subset)
    X = ctx.points if cols is None else ctx.points[cols]
    phi = batch_forward(params, X)
    return _terms_and_grad_phi(ctx, phi, A, f, reg, bidx, False)[0]


def loss_value(params: NetworkParams, ctx: LossContext, row_subset=None) -> float:
    return _combine(ctx, loss_terms(params, ctx, row_subset))


def loss_and_gradient(params: NetworkParams, ctx: LossContext, row_subset=None):
    cols, A, f, reg, bidx = _plan(ctx, row_subset)
    X = ctx.points if cols is None else ctx.points[cols]
    phi, cache, h_last = _forward_cache(params, X, keep=True)
    terms, gphi = _terms_and_grad_phi(ctx, phi, A, f, reg, bidx, True)
    grad = _backward_from_cache(params, cache, h_last, gphi)
    if not all(np.all(np.isfinite(g)) for g in grad.arrays()):
        raise NumericalFailure("non-finite gradient")
    return _combine(ctx, terms), grad


def loss_gradient(params: NetworkParams, ctx: LossContext, row_subset=None) -> NetworkParams:
    return loss_and_gradient(params, ctx, row_subset)[1]


# ---------------------------------------------------------------------------
# training

class Optimizer(str, Enum):
    GD = "gd"
    ADAM = "adam"


@dataclass(frozen=True)
class TrainConfig:
    optimizer: Optimizer = Optimizer.ADAM
    lr0: float = 0.01
    iterations: int = 2000
    cosine_decay: bool = True
    batch_rows: int | None = None
    repeats: int = 1
    seed: int = 0
    backtrack: bool = False  # GD only: halve lr until the loss does not increase

    def __post_init__(self):
        try:
            object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        except ValueError:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}") from None
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if self.iterations < 1 or self.repeats < 1:
            raise ConfigError("iterations and repeats must be >= 1")
        if self.repeats > self.iterations:
            raise ConfigError("more repeats than iterations")
        if self.batch_rows is not None and self.batch_rows < 1:
            raise ConfigError("batch_rows must be positive")

    def lr(self, t: int) -> float:
        if not self.cosine_decay:
            return self.lr0
        return self.lr0 * 0.5 * (math.cos(math.pi * t / self.iterations) + 1.0)


@dataclass
class TrainingHistory:
    iteration: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    full_loss: list = field(default_factory=list)  # nan except at checkpoints
    optimizer: str = ""

    def append(self, t, lr, loss, full=float("nan")):
        self.iteration.append(int(t))
        self.lr.append(float(lr))
        self.loss.append(float(loss))
        self.full_loss.append(float(full))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "lr", "loss", "full_loss_checkpoint"])
            for row in zip(self.iteration, self.lr, self.loss, self.full_loss):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainingHistory":
        h = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                h.append(int(row["iter"]), float(row["lr"]), float(row["loss"]),
                         float(row["full_loss_checkpoint"]))
        return h


def _check_divergence(loss, t, history):
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        err = NumericalFailure(f"training diverged at iteration {t} (loss {loss})", iteration=t)
        err.history = history
        raise err


def train(params: NetworkParams, ctx: LossContext, cfg: TrainConfig,
          callback: Callable | None = None):
    """Optimise ``params`` on ``ctx``; returns (trained params, TrainingHistory).

    Iterations are split evenly over ``cfg.repeats`` outer rounds. With
    ``batch_rows`` set, every round draws a fresh row subset without
    replacement. ``callback(t, params)`` runs before each update and once
    after the last one.
    """
    R = ctx.n_rows
    if cfg.batch_rows is not None and cfg.batch_rows > R:
        raise ConfigError(f"batch_rows={cfg.batch_rows} exceeds the {R} operator rows")
    params = params.copy()
    hist = TrainingHistory(optimizer=cfg.optimizer.value)
    rng = rng_stream(cfg.seed, "row-subsets")
    arrays = params.arrays()
    m1 = [np.zeros_like(x) for x in arrays]
    m2 = [np.zeros_like(x) for x in arrays]
    bounds = np.linspace(0, cfg.iterations, cfg.repeats + 1).round().astype(int)
    lr_scale = 1.0
    t = 0
    for rep in range(cfg.repeats):
        rows = None
        if cfg.batch_rows is not None and cfg.batch_rows < R:
            rows = np.sort(rng.choice(R, size=cfg.batch_rows, replace=False))
        for _ in range(bounds[rep], bounds[rep + 1]):
            if callback is not None:
                callback(t, params)
            loss, grad = loss_and_gradient(params, ctx, rows)
            _check_divergence(loss, t, hist)
            lr = cfg.lr(t) * lr_scale
            garr = grad.arrays()
            if cfg.optimizer is Optimizer.ADAM:
                k = t + 1
                c1, c2 = 1.0 - ADAM_BETA1 ** k, 1.0 - ADAM_BETA2 ** k
                new = []
                for x, g, mm, vv in zip(params.arrays(), garr, m1, m2):
                    mm *= ADAM_BETA1
                    mm += (1.0 - ADAM_BETA1) * g
                    vv *= ADAM_BETA2
                    vv += (1.0 - ADAM_BETA2) * g * g
                    new.append(x - lr * (mm / c1) / (np.sqrt(vv / c2) + ADAM_EPS))
                params = params.with_arrays(new)
            else:
                cand = params.with_arrays([x - lr * g for x, g in zip(params.arrays(), garr)])
                if cfg.backtrack:
                    for _halving in range(60):
                        new_loss = loss_value(cand, ctx, rows)
                        if math.isfinite(new_loss) and new_loss <= loss:
                            break
                        lr_scale *= 0.5
                        lr *= 0.5
                        cand = params.with_arrays([x - lr * g for x, g in zip(params.arrays(), garr)])
                params = cand
            full = float("nan")
            if t == bounds[rep + 1] - 1:
                full = loss_value(params, ctx)
                _check_divergence(full, t, hist)
            hist.append(t, lr, loss, full)
            t += 1
    if callback is not None:
        callback(t, params)
    return params, hist
