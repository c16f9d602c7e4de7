import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from dmpde import manifolds as mf
from dmpde.errors import ConfigError

from conftest import fd_laplace_beltrami

ALL = ["Torus2D", "Flat3DinR12", "SemiTorus2D"]


def test_spec_dimensions():
    for name, (d, n) in {"Torus2D": (2, 3), "Flat3DinR12": (3, 12), "SemiTorus2D": (2, 3)}.items():
        s = mf.get_spec(name)
        assert (s.d, s.n) == (d, n) and s.d < s.n
    assert mf.get_spec("SemiTorus2D").ranges[1] == (0.0, np.pi)
    assert not mf.get_spec("SemiTorus2D").closed


def test_unknown_spec():
    with pytest.raises(ConfigError):
        mf.get_spec("Sphere")


@pytest.mark.parametrize("man,t,expected", [
    ("Torus2D", (0, 0), (3, 0, 0)),
    ("Torus2D", (np.pi / 2, 0), (2, 0, 1)),
    ("Flat3DinR12", (0, 0, 0), (0, 1, 0, 1) * 3),
])
def test_embed_values(man, t, expected):
    np.testing.assert_allclose(mf.embed(man, np.array(t, float)), expected, atol=1e-15)


def test_kappa_and_u_values():
    assert mf.diffusion_kappa("Torus2D", np.array([0.0, 0.0])) == pytest.approx(1.1)
    assert mf.exact_solution("Torus2D", np.array([0.0, 0.0])) == pytest.approx(-2 / 3)
    assert mf.exact_solution("Flat3DinR12", np.array([np.pi / 2, 0, np.pi / 4])) == pytest.approx(1.0)
    assert mf.rhs_f("Flat3DinR12", np.array([np.pi / 2, 0, np.pi / 4])) == pytest.approx(-1.2)
    assert np.all(mf.diffusion_kappa("Flat3DinR12", np.zeros((5, 3))) == 1.0)


def test_torus_implicit_equation(rng):
    t = rng.uniform(0, 2 * np.pi, (100_000, 2))
    x = mf.embed("Torus2D", t)
    assert np.all(np.isfinite(x))
    resid = (np.hypot(x[:, 0], x[:, 1]) - 2) ** 2 + x[:, 2] ** 2 - 1
    assert np.abs(resid).max() < 1e-12


@pytest.mark.parametrize("man", ALL)
def test_jacobian_matches_finite_differences(man, rng):
    s = mf.get_spec(man)
    t = rng.uniform(0.1, 3.0, (20, s.d))
    J = mf.embed_jacobian(man, t)
    h = 1e-6
    for i in range(s.d):
        e = np.zeros(s.d)
        e[i] = h
        fd = (mf.embed(man, t + e) - mf.embed(man, t - e)) / (2 * h)
        np.testing.assert_allclose(J[..., i], fd, atol=1e-8)


@pytest.mark.parametrize("man", ALL)
def test_rhs_matches_finite_difference_oracle(man, rng):
    s = mf.get_spec(man)
    lo = np.array([r[0] for r in s.ranges])
    hi = np.array([r[1] for r in s.ranges])
    t = lo + (hi - lo) * rng.random((1000, s.d))
    oracle = fd_laplace_beltrami(man, t)
    closed = mf.rhs_f(man, t)
    scale = np.abs(closed).max()
    assert np.abs(oracle - closed).max() / scale < 1e-5


def test_torus_rhs_at_origin():
    t = np.array([[0.0, 0.0]])
    assert mf.rhs_f("Torus2D", t)[0] == pytest.approx(fd_laplace_beltrami("Torus2D", t)[0], rel=1e-6)


def test_sample_counts_and_determinism():
    c = mf.sample_cloud("Torus2D", 625, 0, seed=7)
    assert c.points.shape == (625, 3) and c.n_boundary == 0
    c2 = mf.sample_cloud("Torus2D", 625, 0, seed=7)
    assert np.array_equal(c.points, c2.points) and np.array_equal(c.intrinsic, c2.intrinsic)
    c3 = mf.sample_cloud("Torus2D", 625, 0, seed=8)
    assert not np.array_equal(c.points, c3.points)


def test_semitorus_boundary_last():
    c = mf.sample_cloud("SemiTorus2D", 1024, 64, seed=1)
    assert c.n_boundary == 64
    assert np.array_equal(c.boundary_indices, np.arange(960, 1024))
    t2 = c.intrinsic[-64:, 1]
    assert np.all((t2 == 0.0) | (t2 == np.pi))
    assert np.all((c.intrinsic[:960, 1] > 0) & (c.intrinsic[:960, 1] < np.pi))


def test_default_boundary_count():
    assert mf.default_n_boundary("SemiTorus2D", 1024) == 64
    assert mf.default_n_boundary("Torus2D", 1024) == 0


def test_closed_rejects_boundary():
    with pytest.raises(ConfigError):
        mf.sample_cloud("Torus2D", 100, 10)


@pytest.mark.parametrize("man", ALL)
def test_embedding_consistency(man):
    c = mf.sample_cloud(man, 200, None, seed=3)
    np.testing.assert_allclose(c.points, mf.embed(man, c.intrinsic), atol=1e-12)


def test_sampler_uniform_marginals():
    c = mf.sample_cloud("Flat3DinR12", 10_000, 0, seed=11)
    for j in range(3):
        p = stats.kstest(c.intrinsic[:, j] / (2 * np.pi), "uniform").pvalue
        assert p > 0.01


def test_grid_layout_semitorus():
    c = mf.sample_cloud("SemiTorus2D", 1024, layout="grid")
    assert c.n_boundary == 64
    assert np.all(np.isin(c.intrinsic[c.boundary_mask, 1], [0.0, np.pi]))
    with pytest.raises(ConfigError):
        mf.sample_cloud("Torus2D", 1000, layout="grid")


def test_test_grid_sizes():
    assert len(mf.test_grid("Torus2D", 300)) == 90_000
    g2 = mf.test_grid("Torus2D", 2)
    assert len(g2) == 4
    node = np.pi * (1 - 1 / np.sqrt(3))
    np.testing.assert_allclose(np.unique(g2.intrinsic[:, 0]), [node, 2 * np.pi - node], atol=1e-14)


def test_test_grid_flat3d_size():
    assert mf.test_grid("Flat3DinR12", 80).points.shape == (512_000, 12)


def test_cloud_csv_round_trip(tmp_path):
    c = mf.sample_cloud("SemiTorus2D", 300, None, seed=2)
    p = tmp_path / "c.csv"
    mf.write_cloud_csv(c, p)
    header = p.read_text().splitlines()[0]
    assert header == "x1,x2,x3,t1,t2,boundary"
    back = mf.read_cloud_csv(p)
    assert np.array_equal(back.points, c.points)
    assert np.array_equal(back.intrinsic, c.intrinsic)
    assert np.array_equal(back.boundary_mask, c.boundary_mask)


@given(st.floats(0, 2 * np.pi, exclude_max=True), st.floats(0.01, np.pi - 0.01))
def test_projection_inverts_embedding(t1, t2):
    t = np.array([t1, t2])
    back = mf.project_to_intrinsic("SemiTorus2D", mf.embed("SemiTorus2D", t))
    np.testing.assert_allclose(mf.embed("SemiTorus2D", back), mf.embed("SemiTorus2D", t), atol=1e-12)
