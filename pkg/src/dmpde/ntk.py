"""Empirical checks of gradient-descent convergence for wide two-layer ReLU^r networks.

For phi(x) = sum_k a_k sigma(w_k . x) the two Gram matrices are

    G_a[i, j] = 1/m sum_k sigma(w_k.x_i) sigma(w_k.x_j)
    G_w[i, j] = 1/m sum_k a_k^2 sigma'(w_k.x_i) sigma'(w_k.x_j) x_i.x_j

and the loss R(theta) = 1/(2N) |A phi(X) - f|^2 is expected to obey
R(t) <= exp(-m lam_S lam_A t / N) R(0) while G_a stays within lam_S/4 of its
initial value (Frobenius norm). Everything here measures those quantities on
finite runs; nothing is proved.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError
from .manifolds import rng_stream
from .nn import (Activation, LossContext, NetworkParams, TrainConfig, TrainingHistory,
                 activation_derivative, init_two_layer_ntk, train)

MAX_POINTS = 2000
MAX_WIDTH = 2 ** 14
SYMMETRY_TOL = 1e-10
SLACK = 2.0


def _check_two_layer(params: NetworkParams):
    arch = params.arch
    if arch.depth != 1 or arch.bias or arch.activation is Activation.POLY_SINE:
        raise ConfigError("Gram matrices are defined for bias-free two-layer ReLU^r networks")


def _power(params: NetworkParams) -> int:
    return 1 if params.arch.activation is Activation.RELU else int(params.arch.power)


def _features(params: NetworkParams, X):
    _check_two_layer(params)
    X = np.asarray(X, float)
    if len(X) > MAX_POINTS:
        raise ConfigError(f"diagnostics are capped at {MAX_POINTS} points")
    Z = X @ params.weights[0].T
    r = _power(params)
    S = np.maximum(Z, 0.0) ** r
    return X, Z, S


def _symmetrize(G):
    return 0.5 * (G + G.T)


def gram_a(params: NetworkParams, X) -> np.ndarray:
    _, _, S = _features(params, X)
    return _symmetrize(S @ S.T / params.arch.width)


def gram_w(params: NetworkParams, X) -> np.ndarray:
    X, Z, _ = _features(params, X)
    D = activation_derivative(params.arch, Z)
    M = (D * params.a ** 2) @ D.T
    return _symmetrize(M * (X @ X.T) / params.arch.width)


def min_eig(G) -> float:
    G = np.asarray(G, float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ConfigError("square matrix expected")
    scale = max(1.0, float(np.abs(G).max()))
    if np.abs(G - G.T).max() > SYMMETRY_TOL * scale:
        raise ConfigError("matrix is not symmetric")
    return float(sla.eigh(_symmetrize(G), eigvals_only=True, subset_by_index=[0, 0])[0])


@dataclass
class GramReport:
    G_a: np.ndarray
    G_w: np.ndarray
    lambda_min_a: float
    iteration: int


def gram_report(params: NetworkParams, X, iteration: int = 0) -> GramReport:
    Ga = gram_a(params, X)
    return GramReport(Ga, gram_w(params, X), min_eig(Ga), iteration)


def _arccos_J(r: int, theta):
    c, s = np.cos(theta), np.sin(theta)
    pt = np.pi - theta
    if r == 0:
        return pt
    if r == 1:
        return s + pt * c
    if r == 2:
        return 3.0 * s * c + pt * (1.0 + 2.0 * c * c)
    if r == 3:
        return 4.0 * s + 11.0 * s * c * c + pt * (9.0 * c + 6.0 * c ** 3)
    raise ConfigError("arc-cosine kernel implemented for r <= 3")


def arccos_kernel(X, r: int = 1) -> np.ndarray:
    """E_w[relu(w.x)^r relu(w.y)^r] for w ~ N(0, I): the infinite-width limit of G_a."""
    X = np.asarray(X, float)
    norms = np.linalg.norm(X, axis=1)
    cos = np.clip((X @ X.T) / np.outer(norms, norms), -1.0, 1.0)
    theta = np.arccos(cos)
    np.fill_diagonal(theta, 0.0)
    return np.outer(norms, norms) ** r * _arccos_J(r, theta) / (2.0 * np.pi)


# ---------------------------------------------------------------------------
# decay verification

@dataclass
class DecayReport:
    monotone: bool
    bound_satisfaction_fraction: float
    bound_within_slack_fraction: float
    decay_fit_slope: float
    decay_fit_r2: float
    fit_iterations: int
    lambda_S_hat: float
    lambda_A_hat: float
    drift_frobenius: float = float("nan")
    drift_limit: float = float("nan")
    lambda_min_ratio: float = float("nan")
    drift_series: list = field(default_factory=list, repr=False)
    lambda_min_series: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("drift_series")
        out.pop("lambda_min_series")
        return out

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def log_linear_fit(t, loss):
    """Least-squares line through (t, log loss); returns (slope, R^2)."""
    t = np.asarray(t, float)
    y = np.log(np.asarray(loss, float))
    A = np.column_stack([t, np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2


def first_phase_length(loss, drop: float = 1e-6) -> int:
    """Iterations until the loss first falls below ``drop`` times its start value."""
    loss = np.asarray(loss, float)
    below = np.flatnonzero(loss <= drop * loss[0])
    return int(below[0]) + 1 if below.size else len(loss)


def verify_decay(history: TrainingHistory, m: int, lambda_S_hat: float, lambda_A_hat: float, N: int,
                 grams=None, phase_drop: float = 1e-6) -> DecayReport:
    """Compare a GD loss history with exp(-m lam_S lam_A t / N) R(0), t = sum of step sizes.

    ``grams`` optionally holds G_a snapshots along the run (first one at
    initialisation) for the drift and minimum-eigenvalue checks.
    """
    if history.optimizer != "gd":
        raise ConfigError("decay bound applies to plain gradient descent histories")
    loss = np.asarray(history.loss, float)
    lr = np.asarray(history.lr, float)
    # loss[i] is evaluated before step i, i.e. after time sum(lr[:i])
    t = np.concatenate([[0.0], np.cumsum(lr[:-1])])
    bound = np.exp(-m * lambda_S_hat * lambda_A_hat * t / N) * loss[0]
    tiny = 1e-12 * loss[0]
    ok = loss <= bound + tiny
    slack = loss <= SLACK * bound + tiny
    n_fit = max(2, first_phase_length(loss, phase_drop))
    slope, r2 = log_linear_fit(t[:n_fit], loss[:n_fit])
    rep = DecayReport(
        monotone=bool(np.all(np.diff(loss) <= 0)),
        bound_satisfaction_fraction=float(ok.mean()),
        bound_within_slack_fraction=float(slack.mean()),
        decay_fit_slope=slope,
        decay_fit_r2=r2,
        fit_iterations=n_fit,
        lambda_S_hat=float(lambda_S_hat),
        lambda_A_hat=float(lambda_A_hat),
    )
    if grams:
        G0 = grams[0]
        lam0 = min_eig(G0)
        drift = [float(np.linalg.norm(G - G0)) for G in grams]
        lams = [min_eig(G) for G in grams]
        rep.drift_series, rep.lambda_min_series = drift, lams
        rep.drift_frobenius = max(drift)
        rep.drift_limit = 0.25 * lambda_S_hat
        rep.lambda_min_ratio = min(lams) / lam0
    return rep


# ---------------------------------------------------------------------------
# experiment drivers

@dataclass(frozen=True)
class NtkSetup:
    N: int = 20
    n: int = 5
    r: int = 3
    m: int = 8192
    iterations: int = 2000
    seed: int = 0
    lr_fraction: float = 0.5  # step = lr_fraction / largest curvature of the linearised loss
    record_every: int = 50

    def __post_init__(self):
        if self.N > MAX_POINTS or self.m > MAX_WIDTH:
            raise ConfigError("NTK diagnostics are capped at N <= 2000 and m <= 2^14")


def ntk_data(N: int, n: int, seed: int):
    """Points uniform on the unit sphere in R^n and a smooth target with |f| <= 1."""
    rng = rng_stream(seed, "ntk-data")
    X = rng.standard_normal((N, n))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    f = np.sin(2.0 * X.sum(axis=1))
    return X, f


def tangent_kernel(params: NetworkParams, X) -> np.ndarray:
    """m (G_a + G_w): the Gram matrix of parameter gradients of phi."""
    return params.arch.width * (gram_a(params, X) + gram_w(params, X))


def stable_lr(params: NetworkParams, X, A, fraction: float = 0.5) -> float:
    """fraction / lambda_max of A K A^T / N, the Hessian of the linearised loss."""
    A = np.asarray(A, float)
    H = A @ tangent_kernel(params, X) @ A.T / len(X)
    return fraction / float(np.linalg.eigvalsh(_symmetrize(H))[-1])


@dataclass
class NtkRun:
    setup: NtkSetup
    history: TrainingHistory
    grams: list
    report: DecayReport
    lr: float


def run_ntk_experiment(setup: NtkSetup = NtkSetup(), A=None) -> NtkRun:
    """Full-batch GD on 1/(2N)|A phi - f|^2 with gamma = m^{-1/2} initialisation."""
    X, f = ntk_data(setup.N, setup.n, setup.seed)
    A = np.eye(setup.N) if A is None else np.asarray(A, float)
    params = init_two_layer_ntk(setup.n, setup.m, 1.0 / math.sqrt(setup.m), setup.seed, setup.r)
    lr = stable_lr(params, X, A, setup.lr_fraction)
    ctx = LossContext(A, X, f)
    grams = []

    def snap(t, p):
        if t % setup.record_every == 0 or t == setup.iterations:
            grams.append(gram_a(p, X))

    cfg = TrainConfig("gd", lr, setup.iterations, cosine_decay=False, seed=setup.seed)
    _, hist = train(params, ctx, cfg, callback=snap)
    lam_S = min_eig(grams[0])
    lam_A = float(np.linalg.eigvalsh(A @ A.T)[0])
    rep = verify_decay(hist, setup.m, lam_S, lam_A, setup.N, grams)
    return NtkRun(setup, hist, grams, rep, lr)


def monte_carlo_gram_error(X, r: int, widths, n_init: int = 30, seed: int = 0):
    """RMS entrywise deviation of G_a at init from the arc-cosine kernel, per width.

    Returns (widths, errors, fitted log-log slope).
    """
    K = arccos_kernel(X, r)
    n = X.shape[1]
    errs = []
    for m in widths:
        sq = []
        for s in range(n_init):
            p = init_two_layer_ntk(n, int(m), 0.5, seed=seed * 100003 + s * 7919 + int(m), power=r)
            sq.append(np.mean((gram_a(p, X) - K) ** 2))
        errs.append(math.sqrt(float(np.mean(sq))))
    slope = float(np.polyfit(np.log(widths), np.log(errs), 1)[0])
    return np.asarray(widths), np.asarray(errs), slope
