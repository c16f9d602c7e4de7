import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from dmpde import direct, manifolds as mf, nn, operator as op
from dmpde.errors import ConfigError, NumericalFailure

ACTS = [("relu", 1), ("relupow", 3), ("polysine", 1)]


def _small_closed(n=20, seed=0, gamma=1e-2, a=0.0):
    c = mf.sample_cloud("Torus2D", n, 0, seed=seed)
    L = op.assemble_L(c, mf.diffusion_kappa("Torus2D", c.intrinsic), 0.5, k=n - 1)
    f = mf.rhs_f("Torus2D", c.intrinsic)
    return nn.LossContext.closed(L, c.points, f, gamma, a=a)


def _small_dirichlet(n=20, n_b=6, seed=0, lam=5.0):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 3))
    bidx = np.arange(n - n_b, n)
    rows = np.arange(n - n_b)
    M = sp.random(len(rows), n, density=0.4, random_state=seed, format="csr")
    return nn.LossContext(M, pts, rng.standard_normal(len(rows)), a=0.3, row_points=rows, lam=lam,
                          boundary_index=bidx, g=rng.standard_normal(n_b))


def _two_layer(w, a, act="relu", power=1):
    w = np.atleast_2d(np.asarray(w, float))
    arch = nn.Architecture(w.shape[1], w.shape[0], 1, act, power, bias=False)
    return nn.NetworkParams(arch, [w], [], np.asarray(a, float), np.zeros((1, 0)), 0, None)


@pytest.mark.parametrize("act,power", ACTS)
def test_zero_network_outputs_zero(act, power, rng):
    p = nn.init_params(nn.Architecture(3, 5, 3, act, power), seed=1)
    z = p.with_arrays([np.zeros_like(x) for x in p.arrays()])
    assert np.all(nn.batch_forward(z, rng.standard_normal((10, 3))) == 0.0)


def test_single_units():
    x = np.array([2.0, -1.0, 0.5])
    assert nn.forward(_two_layer([1, 0, 0], [1.0]), x) == 2.0
    assert nn.forward(_two_layer([1, 0, 0], [1.0], "relupow", 3), x) == 8.0
    assert nn.forward(_two_layer([-1, 0, 0], [1.0]), x) == 0.0


def test_polysine_formula(rng):
    p = nn.init_params(nn.Architecture(2, 4, 1, "polysine"), seed=3)
    X = rng.standard_normal((6, 2))
    beta, a1, a2, a3 = p.coefs[0]
    z = X @ p.weights[0].T + p.biases[0]
    expect = (a1 * np.sin(beta * z) + a2 * z + a3 * z**2) @ p.a
    np.testing.assert_allclose(nn.batch_forward(p, X), expect, rtol=1e-13)


@pytest.mark.parametrize("act,power", ACTS)
def test_batch_forward_consistency(act, power, rng):
    p = nn.init_params(nn.Architecture(3, 16, 3, act, power), seed=2)
    X = rng.standard_normal((50, 3))
    out = nn.batch_forward(p, X)
    perm = rng.permutation(50)
    np.testing.assert_allclose(nn.batch_forward(p, X[perm]), out[perm], rtol=1e-12, atol=1e-14)
    single = np.array([nn.forward(p, x) for x in X])
    # matrix-matrix and matrix-vector BLAS kernels round differently; same-shape calls are bitwise stable
    np.testing.assert_allclose(single, out, rtol=1e-12, atol=1e-14)
    assert np.array_equal(nn.batch_forward(p, X), out)


def test_forward_rejects_bad_input():
    p = nn.init_params(nn.Architecture(3, 4, 2, "relu"), seed=0)
    with pytest.raises(NumericalFailure):
        nn.forward(p, [np.nan, 0, 0])
    with pytest.raises(ConfigError):
        nn.batch_forward(p, np.zeros((2, 4)))


def test_init_finite_on_torus_config():
    c = mf.sample_cloud("Torus2D", 625, layout="grid")
    p = nn.init_params(nn.Architecture(3, 50, 3, "polysine"), seed=0)
    assert np.all(np.isfinite(nn.batch_forward(p, c)))


def _fd_check(p, ctx, step=1e-5):
    _, g = nn.loss_and_gradient(p, ctx)
    worst = 0.0
    for name, x, gx in zip(p.names(), p.arrays(), g.arrays()):
        fd = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            h = step * max(1.0, abs(x[i]))
            arrs = [y.copy() for y in p.arrays()]
            j = p.names().index(name)
            arrs[j][i] += h
            up = nn.loss_value(p.with_arrays(arrs), ctx)
            arrs[j][i] -= 2 * h
            dn = nn.loss_value(p.with_arrays(arrs), ctx)
            fd[i] = (up - dn) / (2 * h)
        rel = np.linalg.norm(fd - gx) / max(np.linalg.norm(fd), 1e-300)
        worst = max(worst, rel)
        assert rel < 1e-5, (name, rel)
    return worst


def _fd_instance(act, power, ctx):
    p = nn.init_params(nn.Architecture(3, 8, 3, act, power), seed=4, X=ctx.points)
    # biases moved off zero so no unit sits exactly at a kink
    return p.with_arrays([x + 0.1 if n.startswith("b") else x for n, x in zip(p.names(), p.arrays())])


@pytest.mark.parametrize("act,power", ACTS)
@pytest.mark.parametrize("loss", ["closed", "dirichlet"])
def test_gradient_matches_finite_differences(act, power, loss):
    ctx = _small_closed(a=0.7) if loss == "closed" else _small_dirichlet()
    p = _fd_instance(act, power, ctx)
    assert nn.loss_value(p, ctx) < 1e3  # well scaled, so differences are not round-off dominated
    _fd_check(p, ctx)


def test_two_layer_gradient_matches_finite_differences(rng):
    ctx = nn.LossContext(np.eye(20), rng.standard_normal((20, 5)), rng.standard_normal(20))
    p = nn.init_two_layer_ntk(5, 8, 0.5, seed=1, power=3)
    _fd_check(p, ctx)


def test_two_layer_gradient_formula(rng):
    # d/da_k of 1/(2N)|A phi - f|^2 is (1/N) sum_i (A^T e)_i sigma(w_k . x_i)
    X = rng.standard_normal((20, 5))
    A = rng.standard_normal((20, 20))
    f = rng.standard_normal(20)
    p = nn.init_two_layer_ntk(5, 8, 0.5, seed=1, power=2)
    ctx = nn.LossContext(A, X, f)
    e = A @ nn.batch_forward(p, X) - f
    sig = np.maximum(X @ p.weights[0].T, 0) ** 2
    expect = sig.T @ (A.T @ e) / 20
    np.testing.assert_allclose(nn.loss_gradient(p, ctx).a, expect, rtol=1e-12)


def test_zero_residual_gives_zero_gradient():
    ctx0 = _small_closed(gamma=0.0)
    p = nn.init_params(nn.Architecture(3, 8, 3, "polysine"), seed=5)
    phi = nn.batch_forward(p, ctx0.points)
    ctx = nn.LossContext(ctx0.operator, ctx0.points, ctx0.A @ phi)
    g = nn.loss_gradient(p, ctx)
    assert all(np.all(x == 0) for x in g.arrays())


def test_gradient_linear_in_f_at_zero_network():
    ctx = _small_closed(gamma=0.0)
    p = nn.init_params(nn.Architecture(3, 8, 3, "relu"), seed=5)
    p = p.with_arrays(p.arrays()[:-1] + [np.zeros(8)])
    ctx2 = nn.LossContext(ctx.operator, ctx.points, 2 * ctx.f)
    g1, g2 = nn.loss_gradient(p, ctx), nn.loss_gradient(p, ctx2)
    for x, y in zip(g1.arrays(), g2.arrays()):
        np.testing.assert_allclose(y, 2 * x, rtol=1e-14, atol=0)


def test_loss_at_zero_network():
    ctx = _small_closed(gamma=0.0)
    p = nn.init_params(nn.Architecture(3, 8, 2, "relu"), seed=0)
    p = p.with_arrays(p.arrays()[:-1] + [np.zeros(8)])
    assert nn.loss_value(p, ctx) == pytest.approx(0.5 * np.mean(ctx.f**2), rel=1e-14)


def test_loss_matches_direct_solve_residual():
    c = mf.sample_cloud("Torus2D", 625, layout="grid")
    L = op.assemble_L(c, mf.diffusion_kappa("Torus2D", c.intrinsic), 0.1166, k=128)
    f = mf.rhs_f("Torus2D", c.intrinsic)
    sol = direct.solve_closed(L, 0.0, f, 1e-3)
    ctx = nn.LossContext.closed(L, c.points, f, 0.0)
    terms, _ = nn._terms_and_grad_phi(ctx, sol.solution, ctx.A, ctx.f, np.arange(625), None, False)
    assert terms["residual"] == pytest.approx(0.5 * sol.residual_norm**2, rel=1e-10)


def test_dirichlet_terms():
    ctx = _small_dirichlet(lam=5.0)
    p = nn.init_params(nn.Architecture(3, 8, 2, "polysine"), seed=1)
    phi = nn.batch_forward(p, ctx.points)
    ctx_match = nn.LossContext(ctx.operator, ctx.points, ctx.f, a=0.3, row_points=ctx.row_points, lam=5.0,
                               boundary_index=ctx.boundary_index, g=phi[ctx.boundary_index])
    assert nn.loss_terms(p, ctx_match)["boundary"] == 0.0
    t = nn.loss_terms(p, ctx)
    r = ctx.A @ phi - ctx.f
    e = phi[ctx.boundary_index] - ctx.g
    assert t["residual"] == pytest.approx(0.5 * np.mean(r**2), rel=1e-13)
    assert t["boundary"] == pytest.approx(0.5 * np.mean(e**2), rel=1e-13)
    assert abs(nn.loss_value(p, ctx) - (t["residual"] + 5.0 * t["boundary"])) <= 1e-12


def test_shift_applied_at_row_points():
    ctx = _small_dirichlet()
    dense = ctx.operator.toarray()
    dense[np.arange(len(ctx.row_points)), ctx.row_points] -= 0.3
    np.testing.assert_allclose(ctx.A.toarray(), dense, rtol=0, atol=0)


def test_minibatch_unbiased():
    ctx = _small_closed(n=30, gamma=0.0)
    p = nn.init_params(nn.Architecture(3, 8, 2, "polysine"), seed=2)
    full = nn.loss_terms(p, ctx)["residual"]
    rng = np.random.default_rng(0)
    # every row appears in a uniform subset of size s with probability s/N, so
    # enumerating the rotations of one subset size averages exactly to the full loss
    subsets = [np.sort((np.arange(8) * 3 + shift) % 30) for shift in range(30)]
    assert len({tuple(r) for r in subsets}) == 30
    counts = np.bincount(np.concatenate(subsets), minlength=30)
    assert np.all(counts == 8)
    vals = [nn.loss_terms(p, ctx, rows)["residual"] for rows in subsets]
    assert np.mean(vals) == pytest.approx(full, rel=1e-12)
    draws = [nn.loss_terms(p, ctx, np.sort(rng.choice(30, 8, replace=False)))["residual"]
             for _ in range(4000)]
    se = np.std(draws) / np.sqrt(len(draws))
    assert abs(np.mean(draws) - full) < 4 * se


def test_subset_gradient_matches_restricted_problem():
    ctx = _small_closed(n=30, gamma=0.1)
    p = nn.init_params(nn.Architecture(3, 8, 2, "relupow", 2), seed=2)
    rows = np.array([1, 4, 9, 20])
    sub = nn.LossContext(ctx.A[rows], ctx.points, ctx.f[rows], row_points=rows, gamma=0.1)
    v1, g1 = nn.loss_and_gradient(p, ctx, rows)
    v2, g2 = nn.loss_and_gradient(p, sub)
    # the subset regulariser runs over the subset's own points only
    reg_sub = 0.5 * np.mean(nn.batch_forward(p, ctx.points[rows]) ** 2)
    full_reg = nn.loss_terms(p, sub)["regularizer"]
    assert v1 == pytest.approx(v2 - 0.1 * full_reg + 0.1 * reg_sub, rel=1e-12)


def test_context_validation():
    with pytest.raises(ConfigError):
        nn.LossContext(np.eye(3), np.zeros((4, 2)), np.zeros(3))
    with pytest.raises(ConfigError):
        nn.LossContext(np.eye(3), np.zeros((3, 2)), np.zeros(3), gamma=-1)
    with pytest.raises(ConfigError):
        nn.LossContext(np.eye(3), np.zeros((3, 2)), np.zeros(3), lam=1.0)
    with pytest.raises(ConfigError):
        nn.LossContext(np.ones((2, 3)), np.zeros((3, 2)), np.zeros(2))


def test_cosine_schedule():
    cfg = nn.TrainConfig("adam", 0.01, 100)
    assert cfg.lr(0) == 0.01
    assert cfg.lr(50) == pytest.approx(0.005)
    assert cfg.lr(100) == pytest.approx(0.0, abs=1e-18)
    assert nn.TrainConfig("gd", 0.3, 10, cosine_decay=False).lr(7) == 0.3
    with pytest.raises(ConfigError):
        nn.TrainConfig("adam", 0.0, 10)
    with pytest.raises(ValueError):
        nn.TrainConfig("sgd", 0.1, 10)


def test_first_adam_step_is_signed_lr():
    ctx = _small_closed()
    p = nn.init_params(nn.Architecture(3, 8, 2, "polysine"), seed=0)
    _, g = nn.loss_and_gradient(p, ctx)
    lr = 1e-3
    q, _ = nn.train(p, ctx, nn.TrainConfig("adam", lr, 1, cosine_decay=False))
    for x, y, gx in zip(p.arrays(), q.arrays(), g.arrays()):
        np.testing.assert_allclose(y - x, -lr * gx / (np.abs(gx) + nn.ADAM_EPS), rtol=1e-9, atol=1e-18)


def test_gd_scalar_quadratic_converges_geometrically():
    # one point, L = 0, a = 1: loss 1/2 (phi + f)^2, minimiser phi = -f
    ctx = nn.LossContext(np.zeros((1, 1)), np.array([[1.0]]), np.array([0.7]), a=1.0)
    p = _two_layer([[0.8]], [0.5])
    p, h = nn.train(p, ctx, nn.TrainConfig("gd", 0.2, 300, cosine_decay=False))
    assert nn.forward(p, [1.0]) * -1 == pytest.approx(0.7, rel=1e-9)
    loss = np.array(h.loss)
    assert np.all(np.diff(loss[:60]) < 0)
    # near the minimiser the residual contracts by 1 - lr |d phi/d theta|^2 per step,
    # and |d phi/d theta|^2 = a^2 + w^2 for a single positive ReLU unit at x = 1
    w, a = p.weights[0][0, 0], p.a[0]
    rate = (1 - 0.2 * (a * a + w * w)) ** 2
    np.testing.assert_allclose(loss[36:46] / loss[35:45], rate, rtol=2e-3)


def test_gd_backtracking_monotone():
    ctx = _small_closed(n=30)
    p = nn.init_params(nn.Architecture(3, 16, 3, "relupow", 3), seed=1, X=ctx.points)
    _, h = nn.train(p, ctx, nn.TrainConfig("gd", 1.0, 60, cosine_decay=False, backtrack=True))
    assert np.all(np.diff(h.loss) <= 0)


def test_divergence_raises_with_history():
    ctx = _small_closed(n=30)
    p = nn.init_params(nn.Architecture(3, 16, 3, "relupow", 3), seed=1)
    with pytest.raises(NumericalFailure) as exc:
        nn.train(p, ctx, nn.TrainConfig("gd", 1e6, 50, cosine_decay=False))
    assert isinstance(exc.value.history, nn.TrainingHistory)


def test_training_deterministic_and_batched():
    ctx = _small_closed(n=30)
    p = nn.init_params(nn.Architecture(3, 8, 2, "polysine"), seed=1)
    cfg = nn.TrainConfig("adam", 0.01, 40, batch_rows=10, repeats=4, seed=3)
    q1, h1 = nn.train(p, ctx, cfg)
    q2, h2 = nn.train(p, ctx, cfg)
    assert h1.loss == h2.loss and np.array_equal(q1.flat(), q2.flat())
    checkpoints = [i for i, v in enumerate(h1.full_loss) if not math.isnan(v)]
    assert checkpoints == [9, 19, 29, 39]
    with pytest.raises(ConfigError):
        nn.train(p, ctx, nn.TrainConfig("adam", 0.01, 4, batch_rows=31))


def test_callback_sees_every_iterate():
    ctx = _small_closed()
    p = nn.init_params(nn.Architecture(3, 4, 1, "relu"), seed=0)
    seen = []
    nn.train(p, ctx, nn.TrainConfig("gd", 0.01, 5), callback=lambda t, q: seen.append(t))
    assert seen == [0, 1, 2, 3, 4, 5]


def test_ntk_init():
    p0 = nn.init_two_layer_ntk(5, 64, 0.0, seed=0)
    assert np.all(nn.batch_forward(p0, np.ones((3, 5))) == 0)
    p = nn.init_two_layer_ntk(10, 20_000, 0.5, seed=1)
    w = p.weights[0]
    assert abs(w.mean()) < 3 / math.sqrt(w.size)
    assert abs(w.var() - 1) < 0.1
    assert abs(p.a.std() / 0.5 - 1) < 0.05
    q = nn.init_two_layer_ntk(10, 20_000, 0.5, seed=1)
    assert np.array_equal(p.flat(), q.flat())
    with pytest.raises(ConfigError):
        nn.init_two_layer_ntk(5, 0, 0.5)
    with pytest.raises(ConfigError):
        nn.init_two_layer_ntk(5, 4, 1.5)


def test_polysine_init_statistics():
    p = nn.init_params(nn.Architecture(2, 1, 4000, "polysine"), seed=0)
    for j, (mu, sd) in enumerate(nn.POLYSINE_INIT):
        col = p.coefs[:, j]
        assert abs(col.mean() - mu) < 4 * sd / math.sqrt(len(col))
        assert abs(col.std() / sd - 1) < 0.1


def test_he_init_scale():
    p = nn.init_params(nn.Architecture(12, 400, 2, "relu"), seed=0)
    assert abs(p.weights[1].std() / math.sqrt(2 / 400) - 1) < 0.02
    assert np.all(p.biases[0] == 0)


def test_params_round_trip(tmp_path):
    p = nn.init_params(nn.Architecture(3, 6, 3, "polysine"), seed=9)
    path = tmp_path / "p.json"
    p.save(path)
    q = nn.NetworkParams.load(path)
    assert q.arch == p.arch and q.init_seed == 9
    assert np.array_equal(q.flat(), p.flat())
    assert np.array_equal(p.from_flat(p.flat()).flat(), p.flat())


def test_history_csv_round_trip(tmp_path):
    ctx = _small_closed()
    p = nn.init_params(nn.Architecture(3, 4, 2, "polysine"), seed=0)
    _, h = nn.train(p, ctx, nn.TrainConfig("adam", 0.01, 7, repeats=2))
    path = tmp_path / "h.csv"
    h.write_csv(path)
    assert path.read_text().splitlines()[0] == "iter,lr,loss,full_loss_checkpoint"
    back = nn.TrainingHistory.read_csv(path)
    assert back.loss == h.loss and back.lr == h.lr
    assert np.array_equal(np.isnan(back.full_loss), np.isnan(h.full_loss))


@given(st.floats(-5, 5), st.floats(0.1, 3))
def test_activation_derivative_polysine(z, beta):
    arch = nn.Architecture(1, 1, 1, "polysine")
    c = np.array([beta, 0.8, 0.3, -0.2])
    d = nn.activation_derivative(arch, np.array([z]), c)[0]
    expect = 0.8 * beta * math.cos(beta * z) + 0.3 - 0.4 * z
    assert d == pytest.approx(expect, rel=1e-12, abs=1e-14)


def test_relu_derivative_at_zero():
    for act, power in (("relu", 1), ("relupow", 3)):
        arch = nn.Architecture(1, 1, 1, act, power)
        assert nn.activation_derivative(arch, np.array([0.0]))[0] == 0.0


def test_shifted_init_centres_preactivations(rng):
    X = rng.standard_normal((200, 4)) * 3.0
    p = nn.init_params(nn.Architecture(4, 32, 3, "relupow", 3), seed=0, X=X)
    h = X
    for W, b in zip(p.weights, p.biases):
        z = h @ W.T + b
        assert np.std(z - b) == pytest.approx(nn.SHIFTED_SPREAD, rel=1e-12)
        np.testing.assert_array_equal(b, nn.SHIFTED_CENTRE)
        h = np.maximum(z, 0) ** 3


def test_init_scheme_selection(rng):
    X = rng.standard_normal((50, 3))
    cube = nn.Architecture(3, 8, 2, "relupow", 3)
    he = nn.init_params(cube, seed=1, scheme="he")
    assert all(np.all(b == 0) for b in he.biases)
    # auto: shifted for ReLU^r, r > 1, when data is given; He otherwise
    assert np.all(nn.init_params(cube, seed=1, X=X).biases[0] == nn.SHIFTED_CENTRE)
    assert np.array_equal(nn.init_params(cube, seed=1).weights[0], he.weights[0])
    relu = nn.Architecture(3, 8, 2, "relu")
    assert np.array_equal(nn.init_params(relu, seed=1, X=X).weights[0],
                          nn.init_params(relu, seed=1).weights[0])
    with pytest.raises(ConfigError):
        nn.init_params(cube, seed=1, scheme="shifted")
    with pytest.raises(ConfigError):
        nn.init_params(cube, seed=1, scheme="xavier")
